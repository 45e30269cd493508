//! Problem instances: nonlinearities, presets, random initial conditions and the
//! fine-grid reference solver that produces training targets.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::str::FromStr;

use crate::error::{check_dim, invalid, Error, Result};
use crate::grid_operators::{make_shifted_solver, Boundary, GridSpec, LinearOperator, ShiftedSolver};
use crate::lirk::{Lirk2, LirkParams, OdeSystem};

/// Scalar nonlinearity `f` applied componentwise, with its derivative.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Nonlinearity {
    /// `(1 - u) / (1 + u^2)`
    ReactionDiffusion,
    Sine,
    /// `sqrt(1 + u^2)`
    SqrtOnePlusSq,
    Zero,
    /// `slope * u + intercept`; handy for hand-checkable cases.
    Affine { slope: f64, intercept: f64 },
}

impl Nonlinearity {
    #[inline]
    pub fn value(&self, u: f64) -> f64 {
        match *self {
            Self::ReactionDiffusion => (1.0 - u) / (1.0 + u * u),
            Self::Sine => u.sin(),
            Self::SqrtOnePlusSq => (1.0 + u * u).sqrt(),
            Self::Zero => 0.0,
            Self::Affine { slope, intercept } => slope * u + intercept,
        }
    }

    #[inline]
    pub fn derivative(&self, u: f64) -> f64 {
        match *self {
            Self::ReactionDiffusion => {
                let q = 1.0 + u * u;
                (-q - 2.0 * u * (1.0 - u)) / (q * q)
            }
            Self::Sine => u.cos(),
            Self::SqrtOnePlusSq => u / (1.0 + u * u).sqrt(),
            Self::Zero => 0.0,
            Self::Affine { slope, .. } => slope,
        }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Self::Zero => DMatrix::zeros(x.nrows(), x.ncols()),
            _ => x.map(|u| self.value(u)),
        }
    }

    pub fn apply_derivative(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        x.map(|u| self.derivative(u))
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Self::Zero)
    }
}

/// Spatial grid, nonlinearity and horizon of a semilinear heat problem.
/// The diffusion coefficient is carried by the grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub grid: GridSpec,
    pub nonlinearity: Nonlinearity,
    pub terminal_time: f64,
}

impl ProblemSpec {
    pub fn new(grid: GridSpec, nonlinearity: Nonlinearity, terminal_time: f64) -> Result<Self> {
        if !(terminal_time > 0.0 && terminal_time.is_finite()) {
            return Err(invalid(format!("terminal time must be positive, got {terminal_time}")));
        }
        Ok(Self {
            grid,
            nonlinearity,
            terminal_time,
        })
    }

    pub fn diffusion(&self) -> f64 {
        self.grid.diffusion_scale
    }

    /// Same problem on a grid with `points_per_axis` nodes per axis.
    pub fn with_points(&self, points_per_axis: usize) -> Result<Self> {
        let g = self.grid;
        Self::new(
            GridSpec::new(g.dimension, points_per_axis, g.boundary, g.diffusion_scale)?,
            self.nonlinearity,
            self.terminal_time,
        )
    }
}

/// Laws of the random initial values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitialLaw {
    /// `sum_{n=1}^{modes} amplitude Z_n sin(pi n x) / n^2`
    SineDecay { modes: usize, amplitude: f64 },
    /// `2 A_0 + sum_{n=1}^{modes} (2 A_n sin(2 pi n x) + 2 B_n cos(2 pi n x)) / n^2`.
    /// With `shared_coefficients`, `B_n = A_n`.
    FourierDecay {
        modes: usize,
        shared_coefficients: bool,
    },
    /// `2 (2I - Δ)^{-1} X` on an `n x n` torus grid, `X_ij ~ N(0, n^2)`.
    Grf2d { n: usize },
}

impl InitialLaw {
    /// Number of standard normal draws consumed per sample.
    pub fn draws(&self) -> usize {
        match *self {
            Self::SineDecay { modes, .. } => modes,
            Self::FourierDecay {
                modes,
                shared_coefficients,
            } => 1 + if shared_coefficients { modes } else { 2 * modes },
            Self::Grf2d { n } => n * n,
        }
    }

    /// Binds the law to the grid it is evaluated on.
    pub fn sampler(&self, grid: &GridSpec) -> Result<InitialSampler> {
        let kind = match *self {
            Self::SineDecay { modes, amplitude } => {
                if grid.dimension != 1 {
                    return Err(invalid("sine expansion is one-dimensional"));
                }
                let x = grid.axis_nodes();
                let basis = DMatrix::from_fn(x.len(), modes, |i, n| {
                    let n = (n + 1) as f64;
                    amplitude * (PI * n * x[i]).sin() / (n * n)
                });
                SamplerKind::Linear { basis }
            }
            Self::FourierDecay {
                shared_coefficients, ..
            } => {
                if grid.dimension != 1 {
                    return Err(invalid("Fourier expansion is one-dimensional"));
                }
                let x = grid.axis_nodes();
                let cols = self.draws();
                let basis = DMatrix::from_fn(x.len(), cols, |i, c| {
                    if c == 0 {
                        return 2.0;
                    }
                    let (n, which) = if shared_coefficients {
                        (c, 2)
                    } else {
                        ((c + 1) / 2, c % 2)
                    };
                    let nf = n as f64;
                    let arg = 2.0 * PI * nf * x[i];
                    let v = match which {
                        1 => arg.sin(),
                        0 => arg.cos(),
                        _ => arg.sin() + arg.cos(),
                    };
                    2.0 * v / (nf * nf)
                });
                SamplerKind::Linear { basis }
            }
            Self::Grf2d { n } => {
                if grid.dimension != 2
                    || grid.boundary != Boundary::Periodic
                    || grid.points_per_axis != n
                {
                    return Err(invalid(format!(
                        "random field law needs the periodic {n}x{n} grid"
                    )));
                }
                // 2(2I - Δ)^{-1} = (I - Δ/2)^{-1}
                let lap = GridSpec::new(2, n, Boundary::Periodic, 1.0)?.laplacian()?;
                SamplerKind::Field {
                    solver: make_shifted_solver(&lap, 0.5)?,
                    std_dev: n as f64,
                }
            }
        };
        Ok(InitialSampler {
            draws: self.draws(),
            dim: grid.unknowns(),
            kind,
        })
    }
}

#[derive(Clone, Debug)]
enum SamplerKind {
    Linear { basis: DMatrix<f64> },
    Field { solver: ShiftedSolver, std_dev: f64 },
}

/// An initial law evaluated on a fixed grid.
#[derive(Clone, Debug)]
pub struct InitialSampler {
    draws: usize,
    dim: usize,
    kind: SamplerKind,
}

impl InitialSampler {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn draws(&self) -> usize {
        self.draws
    }

    /// Maps a `draws x B` matrix of standard normal coefficients to `B` grid functions.
    pub fn from_coefficients(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("initial law coefficients", self.draws, z.nrows())?;
        match &self.kind {
            SamplerKind::Linear { basis } => Ok(basis * z),
            SamplerKind::Field { solver, std_dev } => solver.solve(&(z * *std_dev)),
        }
    }

    pub fn draw_coefficients<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(self.draws, (0..self.draws).map(|_| rng.sample(StandardNormal)))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = self.draw_coefficients(rng);
        let out = self
            .from_coefficients(&DMatrix::from_column_slice(self.draws, 1, z.as_slice()))
            .expect("coefficient count matches");
        DVector::from_column_slice(out.as_slice())
    }
}

/// Draws a sine-decay sample evaluated on `grid`.
pub fn sample_sine_decay<R: Rng + ?Sized>(rng: &mut R, grid: &GridSpec) -> Result<DVector<f64>> {
    Ok(InitialLaw::SineDecay {
        modes: 32,
        amplitude: 5.0,
    }
    .sampler(grid)?
    .sample(rng))
}

/// Draws a Fourier-decay sample evaluated on `grid`.
pub fn sample_fourier_decay<R: Rng + ?Sized>(
    rng: &mut R,
    grid: &GridSpec,
) -> Result<DVector<f64>> {
    Ok(InitialLaw::FourierDecay {
        modes: 16,
        shared_coefficients: false,
    }
    .sampler(grid)?
    .sample(rng))
}

/// Draws an 80x80 random field and its restriction to every second node (40x40).
pub fn sample_grf2d<R: Rng + ?Sized>(rng: &mut R) -> Result<(DVector<f64>, DVector<f64>)> {
    let fine = GridSpec::new(2, 80, Boundary::Periodic, 1.0)?;
    let coarse = GridSpec::new(2, 40, Boundary::Periodic, 1.0)?;
    let field = InitialLaw::Grf2d { n: 80 }.sampler(&fine)?.sample(rng);
    let idx = restriction_indices(&coarse, &fine)?;
    let coarse_field = DVector::from_iterator(idx.len(), idx.iter().map(|&i| field[i]));
    Ok((field, coarse_field))
}

/// Fine-grid resolution and step count of the reference solver. The scheme is
/// always the Crank–Nicolson member `p = (1/2, 1/2)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceSolver {
    pub fine_points: usize,
    pub steps: usize,
}

/// Indices into the fine grid of the nodes that coincide with the coarse grid.
pub fn restriction_indices(coarse: &GridSpec, fine: &GridSpec) -> Result<Vec<usize>> {
    if coarse.dimension != fine.dimension || coarse.boundary != fine.boundary {
        return Err(invalid("coarse and fine grids differ in dimension or boundary"));
    }
    let (nc, nf) = (coarse.points_per_axis, fine.points_per_axis);
    let axis: Vec<usize> = match coarse.boundary {
        Boundary::Dirichlet => {
            if (nf + 1) % (nc + 1) != 0 {
                return Err(invalid(format!(
                    "Dirichlet grids incompatible: {nf}+1 is not a multiple of {nc}+1"
                )));
            }
            let k = (nf + 1) / (nc + 1);
            (0..nc).map(|i| k * (i + 1) - 1).collect()
        }
        Boundary::Periodic => {
            if nf % nc != 0 {
                return Err(invalid(format!(
                    "periodic grids incompatible: {nf} is not a multiple of {nc}"
                )));
            }
            let k = nf / nc;
            (0..nc).map(|i| k * i).collect()
        }
    };
    Ok(match coarse.dimension {
        1 => axis,
        _ => axis
            .iter()
            .flat_map(|&i| axis.iter().map(move |&j| i * nf + j))
            .collect(),
    })
}

/// Picks the rows `indices` out of a batch of column states.
pub fn restrict(values: &DMatrix<f64>, indices: &[usize]) -> DMatrix<f64> {
    values.select_rows(indices)
}

/// Reference solver bound to a problem: fine-grid operator, cached stepper and
/// restriction map.
#[derive(Clone, Debug)]
pub struct PreparedReference {
    fine: ProblemSpec,
    coarse: ProblemSpec,
    op: LinearOperator,
    stepper: Lirk2,
    steps: usize,
    indices: Vec<usize>,
}

impl PreparedReference {
    pub fn new(spec: &ProblemSpec, solver: ReferenceSolver) -> Result<Self> {
        if solver.steps == 0 {
            return Err(invalid("reference solver needs at least one step"));
        }
        let fine = spec.with_points(solver.fine_points)?;
        let indices = restriction_indices(&spec.grid, &fine.grid)?;
        let op = fine.grid.laplacian()?;
        let h = spec.terminal_time / solver.steps as f64;
        let stepper = Lirk2::new(LirkParams::CRANK_NICOLSON, &op, h)?;
        Ok(Self {
            fine,
            coarse: *spec,
            op,
            stepper,
            steps: solver.steps,
            indices,
        })
    }

    pub fn fine_problem(&self) -> &ProblemSpec {
        &self.fine
    }

    pub fn coarse_problem(&self) -> &ProblemSpec {
        &self.coarse
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Terminal values on the fine grid for a batch of fine-grid initial values.
    pub fn solve_fine(&self, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let sys = OdeSystem {
            linear: &self.op,
            nonlinearity: self.fine.nonlinearity,
        };
        let mut u = g.clone();
        for _ in 0..self.steps {
            u = self.stepper.step(&sys, &u)?;
        }
        Ok(u)
    }

    /// Terminal values restricted to the coarse evaluation grid.
    pub fn solve(&self, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(restrict(&self.solve_fine(g)?, &self.indices))
    }
}

/// One-shot reference solve of a batch of fine-grid initial values.
pub fn reference_solve(
    spec: &ProblemSpec,
    solver: ReferenceSolver,
    g: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    PreparedReference::new(spec, solver)?.solve(g)
}

/// Root mean square over the evaluation nodes.
pub fn seminorm(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("seminorm of no values"));
    }
    Ok(mean_square(values).sqrt())
}

#[inline]
pub(crate) fn mean_square(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64
}

/// Squared seminorm of every column.
pub fn column_seminorms_sq(values: &DMatrix<f64>) -> Vec<f64> {
    values.column_iter().map(|c| mean_square(c.as_slice())).collect()
}

/// The three benchmark configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Rd1d,
    Sg1d,
    Heat2d,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rd1d" => Ok(Self::Rd1d),
            "sg1d" => Ok(Self::Sg1d),
            "heat2d" => Ok(Self::Heat2d),
            other => Err(invalid(format!(
                "unknown problem preset '{other}' (expected rd1d, sg1d or heat2d)"
            ))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Rd1d => "rd1d",
            Self::Sg1d => "sg1d",
            Self::Heat2d => "heat2d",
        })
    }
}

const NU: f64 = 0.01;

fn tenths(range: std::ops::RangeInclusive<u32>) -> Vec<f64> {
    range.map(|i| i as f64 / 10.0).collect()
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Rd1d, Preset::Sg1d, Preset::Heat2d];

    pub fn problem(&self) -> ProblemSpec {
        let (dim, n, boundary, f, t) = match self {
            Self::Rd1d => (1, 35, Boundary::Dirichlet, Nonlinearity::ReactionDiffusion, 1.0),
            Self::Sg1d => (1, 30, Boundary::Periodic, Nonlinearity::Sine, 2.0),
            Self::Heat2d => (2, 40, Boundary::Periodic, Nonlinearity::SqrtOnePlusSq, 2.0),
        };
        ProblemSpec {
            grid: GridSpec {
                dimension: dim,
                points_per_axis: n,
                boundary,
                diffusion_scale: NU,
            },
            nonlinearity: f,
            terminal_time: t,
        }
    }

    pub fn initial_law(&self) -> InitialLaw {
        match self {
            Self::Rd1d => InitialLaw::SineDecay {
                modes: 32,
                amplitude: 5.0,
            },
            Self::Sg1d => InitialLaw::FourierDecay {
                modes: 16,
                shared_coefficients: false,
            },
            Self::Heat2d => InitialLaw::Grf2d { n: 80 },
        }
    }

    pub fn reference_solver(&self) -> ReferenceSolver {
        let (fine_points, steps) = match self {
            Self::Rd1d => (287, 300),
            Self::Sg1d => (420, 420),
            Self::Heat2d => (80, 200),
        };
        ReferenceSolver { fine_points, steps }
    }

    /// Number of time-step blocks in the base model.
    pub fn base_blocks(&self) -> usize {
        match self {
            Self::Rd1d => 5,
            Self::Sg1d => 15,
            Self::Heat2d => 2,
        }
    }

    pub fn difference_widths(&self) -> Vec<usize> {
        match self {
            Self::Rd1d => vec![35, 50, 150, 35],
            Self::Sg1d => vec![30, 128, 128, 30],
            Self::Heat2d => vec![1600, 512, 512, 1600],
        }
    }

    pub fn ann_widths(&self) -> Vec<usize> {
        match self {
            Self::Rd1d => vec![35, 100, 220, 150, 35],
            Self::Sg1d => vec![30, 100, 300, 160, 30],
            Self::Heat2d => vec![1600, 3200, 3200, 3200, 1600],
        }
    }

    /// Batch size for the evaluation-time column.
    pub fn eval_batch(&self) -> usize {
        match self {
            Self::Heat2d => 512,
            _ => 4096,
        }
    }

    /// Classical step counts compared against in reports.
    pub fn baseline_steps(&self) -> Vec<usize> {
        match self {
            Self::Heat2d => vec![2],
            _ => (15..=20).collect(),
        }
    }

    /// Parameter grid of the grid sweep.
    pub fn sweep_grid(&self) -> Vec<LirkParams> {
        let (p1s, p2s) = match self {
            Self::Rd1d => (tenths(1..=9), tenths(3..=9)),
            Self::Sg1d => (
                vec![0.1, 0.3, 0.5, 0.7, 0.9],
                [6.0, 13.0, 20.0, 27.0].iter().map(|v| v / 30.0).collect(),
            ),
            Self::Heat2d => (tenths(1..=9), tenths(2..=9)),
        };
        p1s.iter()
            .flat_map(|&p1| p2s.iter().map(move |&p2| LirkParams { p1, p2 }))
            .collect()
    }

    /// Sampling box `([p1_lo, p1_hi], [p2_lo, p2_hi])` of the adaptive sweep.
    pub fn adaptive_box(&self) -> ([f64; 2], [f64; 2]) {
        match self {
            Self::Rd1d => ([0.1, 0.9], [0.3, 0.9]),
            Self::Sg1d => ([0.1, 0.9], [0.2, 0.9]),
            Self::Heat2d => ([0.1, 0.9], [0.2, 0.9]),
        }
    }
}
