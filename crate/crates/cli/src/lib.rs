//! Batch entry points: data generation, sweeps, baselines and report tables.

pub mod commands;
pub mod config;
pub mod report;

pub use config::{parse_steps, CliConfig, Method, Scale};
pub use report::ReportRow;
