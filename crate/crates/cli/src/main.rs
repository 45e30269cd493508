use std::path::PathBuf;

use adann_cli::commands;
use adann_cli::config::{parse_steps, CliConfig, Method, Scale};
use adann_core::{Preset, SweepMode};
use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "adann", version, about = "Operator learning for semilinear heat equations")]
struct Cli {
    /// TOML configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Use full-scale sample counts, step budgets and run counts.
    #[arg(long, global = true)]
    full: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Grid,
    Adaptive,
}

#[derive(Subcommand)]
enum Command {
    /// Sample initial values and compute reference solutions.
    GenData {
        #[arg(long)]
        problem: Option<Preset>,
        /// Sample count (default: the configured count after scaling).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and select models over scheme parameters.
    Sweep {
        #[arg(long)]
        problem: Option<Preset>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Adaptive run count, used as given.
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classical or plain-network reference rows.
    Baseline {
        #[arg(long)]
        problem: Option<Preset>,
        #[arg(long, value_enum)]
        method: Method,
        /// Step counts: `20`, `15,16` or `15..20`.
        #[arg(long)]
        steps: Option<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge report files into one table.
    Report {
        #[arg(long, num_args = 0..)]
        runs: Vec<PathBuf>,
        #[arg(long, num_args = 0..)]
        baselines: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if cli.full {
        cfg.scale = Scale::FULL;
    }
    let problem = match &cli.command {
        Command::GenData { problem, .. }
        | Command::Sweep { problem, .. }
        | Command::Baseline { problem, .. } => *problem,
        Command::Report { .. } => None,
    };
    if let Some(p) = problem {
        cfg.problem = p;
    }
    match cli.command {
        Command::GenData { n, out, .. } => {
            cfg.validate()?;
            let g = commands::with_workers(cfg.workers, || commands::gen_data(&cfg, n, &out))?;
            println!(
                "wrote {} samples of {} to {} in {:.2} s (seed {})",
                g.dataset.len(),
                cfg.problem,
                out.display(),
                g.seconds,
                cfg.seed
            );
        }
        Command::Sweep {
            mode, runs, data, out, ..
        } => {
            if let Some(m) = mode {
                cfg.sweep.mode = match m {
                    Mode::Grid => SweepMode::Grid,
                    Mode::Adaptive => SweepMode::Adaptive,
                };
            }
            if let Some(r) = runs {
                cfg.sweep.runs = r;
                cfg.scale.run_divisor = 1;
            }
            cfg.validate()?;
            let s = commands::with_workers(cfg.workers, || commands::sweep(&cfg, &data, &out, true))?;
            let best = &s.records[s.selected];
            println!(
                "{} runs; selected run {} at p=({}, {}); outputs in {}",
                s.records.len(),
                best.run,
                best.params.p1,
                best.params.p2,
                out.display()
            );
            print_rows(&s.rows);
        }
        Command::Baseline {
            method,
            steps,
            data,
            out,
            ..
        } => {
            cfg.baseline.method = method;
            if let Some(s) = steps {
                cfg.baseline.steps = Some(parse_steps(&s)?);
            }
            cfg.validate()?;
            let rows = commands::with_workers(cfg.workers, || {
                commands::baseline(&cfg, method, &data, &out)
            })?;
            print_rows(&rows);
        }
        Command::Report {
            runs,
            baselines,
            out,
        } => {
            let rows = commands::report(&runs, &baselines, &out)?;
            print_rows(&rows);
        }
    }
    Ok(())
}

fn print_rows(rows: &[adann_cli::ReportRow]) {
    let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4e}"));
    for r in rows {
        println!(
            "{:<24} L1 {:<11} L2 {:<11} params {}",
            r.method,
            cell(r.l1),
            cell(r.l2),
            r.trainable_params.map_or("-".into(), |p| p.to_string())
        );
    }
}
