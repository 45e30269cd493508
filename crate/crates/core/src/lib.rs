pub mod base_model;
pub mod dataset_io;
pub mod difference_model;
pub mod error;
pub mod grid_operators;
pub mod lirk;
pub mod orchestration;
pub mod pde_problems;
pub mod rng;
pub mod training;

pub use base_model::{BaseGradient, BaseWeights, ForwardTape};
pub use difference_model::{MlpSpec, MlpWeights};
pub use error::{Error, Result};
pub use grid_operators::{
    build_dirichlet_laplacian_1d, build_periodic_laplacian_1d, build_periodic_laplacian_2d,
    make_shifted_solver, Boundary, GridSpec, LinearOperator, ShiftedSolver,
};
pub use lirk::{ButcherTableau, LirkParams, OdeSystem};
pub use pde_problems::{InitialLaw, Nonlinearity, Preset, ProblemSpec, ReferenceSolver};
pub use dataset_io::{DEFAULT_SPLIT, Checkpoint, Container, Dataset, SampleSet, Splits};
pub use training::{AdamState, ErrorReport, TrainConfig, TrainOutcome};
pub use orchestration::{ModelSetup, RunRecord, RunStatus, SweepConfig, SweepMode, SweepPlan};
