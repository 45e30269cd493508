//! The batch commands. Each writes its outputs plus `config.toml`, the effective
//! configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use adann_core::base_model::{self, from_lirk_params, BaseWeights};
use adann_core::dataset_io::{generate_dataset, split_dataset};
use adann_core::difference_model::{glorot_uniform_init, mlp_forward};
use adann_core::orchestration::{
    run_sweep, select_best_run, write_actions_csv, write_heatmaps, write_runs_csv, RunRecord,
};
use adann_core::rng::{derive_seed, split, Domain};
use adann_core::training::{
    evaluate, full_model_eval, mean_seminorm_sq, time_evaluations, train_mlp,
};
use adann_core::{
    Checkpoint, Dataset, ErrorReport, LirkParams, MlpSpec, MlpWeights, ModelSetup, SampleSet,
    Splits, SweepConfig, SweepMode, SweepPlan, TrainConfig,
};
use anyhow::{bail, Context, Result};
use nalgebra::DMatrix;
use serde_json::Value;

use crate::config::{CliConfig, Method};
use crate::report::{self, ReportRow};

/// Runs `f` on a pool of `workers` threads (all cores for 0).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if workers == 0 {
        return f();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .context("building worker pool")?
        .install(f)
}

fn prepare_dir(out: &Path, cfg: &CliConfig) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.toml"), cfg.echo()?)
        .with_context(|| format!("writing {}", out.join("config.toml").display()))
}

fn create(path: &Path) -> Result<std::fs::File> {
    std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))
}

pub struct GenData {
    pub dataset: Dataset,
    pub seconds: f64,
}

/// Writes a dataset for the configured preset and `<out>.config.toml` beside it.
pub fn gen_data(cfg: &CliConfig, n: Option<usize>, out: &Path) -> Result<GenData> {
    let p = cfg.problem;
    let n = n.unwrap_or(cfg.effective().samples);
    if n == 0 {
        bail!("sample count must be positive");
    }
    let t0 = Instant::now();
    let dataset = generate_dataset(&p.problem(), &cfg.initial_law(), p.reference_solver(), n, cfg.seed)?;
    let seconds = t0.elapsed().as_secs_f64();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    dataset
        .save(out)
        .with_context(|| format!("writing {}", out.display()))?;
    std::fs::write(out.with_extension("config.toml"), cfg.echo()?)?;
    Ok(GenData { dataset, seconds })
}

/// Loads a dataset and checks that it belongs to the configured preset.
pub fn load_splits(cfg: &CliConfig, data: &Path) -> Result<Splits> {
    let d = Dataset::load(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let p = cfg.problem;
    if d.problem != p.problem() || d.law != cfg.initial_law() {
        bail!("dataset {} was not generated for problem {p}", data.display());
    }
    Ok(split_dataset(&d, cfg.data.split)?)
}

fn report_row(
    method: impl Into<String>,
    model: impl Fn(&DMatrix<f64>) -> adann_core::Result<DMatrix<f64>> + Sync,
    test: &SampleSet,
    params: usize,
    train_seconds: f64,
    eval_batch: usize,
) -> Result<ReportRow> {
    let r = ErrorReport {
        params,
        train_seconds,
        ..evaluate(&model, test)?
    };
    let eval_time = time_evaluations(&model, test, eval_batch)?;
    Ok(ReportRow::from_report(method, &r, eval_time))
}

pub struct Sweep {
    pub records: Vec<RunRecord>,
    /// Index into `records`.
    pub selected: usize,
    pub rows: Vec<ReportRow>,
    pub checkpoint: Checkpoint,
}

pub fn sweep_config(cfg: &CliConfig) -> SweepConfig {
    let e = cfg.effective();
    SweepConfig {
        base: TrainConfig {
            steps: e.base_steps,
            ..cfg.sweep.base.clone()
        },
        difference: TrainConfig {
            steps: e.difference_steps,
            ..cfg.sweep.difference.clone()
        },
        error_scale_samples: cfg.sweep.error_scale_samples,
        seed: cfg.seed,
    }
}

pub fn sweep_plan(cfg: &CliConfig) -> SweepPlan {
    let p = cfg.problem;
    match cfg.sweep.mode {
        SweepMode::Grid => SweepPlan::grid(p.sweep_grid()),
        SweepMode::Adaptive => SweepPlan::adaptive(
            p.adaptive_box(),
            cfg.effective().adaptive_runs,
            cfg.sweep.exploit_probability,
        ),
    }
}

/// Runs a sweep, selects the best run on the selection split, and reports it on
/// the test split.
pub fn sweep(cfg: &CliConfig, data: &Path, out: &Path, progress: bool) -> Result<Sweep> {
    let splits = load_splits(cfg, data)?;
    let p = cfg.problem;
    let setup = ModelSetup::from_preset(p)?;
    let f = setup.problem.nonlinearity;
    prepare_dir(out, cfg)?;

    let plan = sweep_plan(cfg);
    let scfg = sweep_config(cfg);
    let t0 = Instant::now();
    let log = |r: &RunRecord| {
        if progress {
            eprintln!(
                "run {:>3} p=({:.4}, {:.4}) init {:.4e} base {:.4e} full {:.4e} {}",
                r.run, r.params.p1, r.params.p2, r.init_l2, r.base_l2, r.full_l2, r.status
            );
        }
    };
    let mut records = run_sweep(&plan, &setup, &splits, &scfg, &log)?;
    let train_seconds = t0.elapsed().as_secs_f64();
    let selected = select_best_run(&mut records, &setup, &splits.selection)?;
    let best = &records[selected];
    let (Some(base), Some(theta)) = (best.base.clone(), best.difference.clone()) else {
        bail!("no run finished successfully");
    };
    let eps = best.epsilon;

    write_runs_csv(&records, create(&out.join("runs.csv"))?)?;
    write_actions_csv(&records, create(&out.join("actions.csv"))?)?;
    write_selection_csv(&records, selected, &out.join("selection.csv"))?;
    if plan.mode == SweepMode::Grid {
        write_heatmaps(&records, out)?;
    }

    let mut metadata = BTreeMap::new();
    metadata.insert("problem".into(), Value::from(p.to_string()));
    metadata.insert("run".into(), Value::from(best.run));
    metadata.insert("p1".into(), Value::from(best.params.p1));
    metadata.insert("p2".into(), Value::from(best.params.p2));
    metadata.insert("seed".into(), Value::from(cfg.seed));
    let checkpoint = Checkpoint {
        base: (*base).clone(),
        difference: Some((*theta).clone()),
        error_scale: eps,
        metadata,
    };
    checkpoint.save(&out.join("checkpoint.adann"))?;

    let batch = p.eval_batch();
    let base_params = base.param_count();
    let full_params = base_params + theta.param_count();
    let full = |x: &DMatrix<f64>| full_model_eval(&base, f, &theta, eps, x);
    let rows = match plan.mode {
        SweepMode::Grid => vec![
            report_row(
                "adann grid base-only",
                |x: &DMatrix<f64>| base_model::forward(&base, f, x),
                &splits.test,
                base_params,
                train_seconds,
                batch,
            )?,
            report_row("adann grid full", full, &splits.test, full_params, train_seconds, batch)?,
        ],
        SweepMode::Adaptive => vec![report_row(
            "adann adaptive full",
            full,
            &splits.test,
            full_params,
            train_seconds,
            batch,
        )?],
    };
    report::save_rows(&rows, &out.join("report.csv"))?;
    Ok(Sweep {
        records,
        selected,
        rows,
        checkpoint,
    })
}

fn write_selection_csv(records: &[RunRecord], selected: usize, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["run", "base_loss", "full_loss", "selected"])?;
    for (i, r) in records.iter().enumerate() {
        let (b, f) = r
            .selection
            .filter(|_| r.is_ok())
            .map_or((f64::INFINITY, f64::INFINITY), |s| (s.base, s.full));
        w.write_record([
            r.run.to_string(),
            format!("{b:e}"),
            format!("{f:e}"),
            (i == selected).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Classical rollouts at `p = (1/2, 1/2)` for every `m` in `steps`.
pub fn cn_rows(cfg: &CliConfig, steps: &[usize], test: &SampleSet) -> Result<Vec<ReportRow>> {
    let p = cfg.problem;
    let problem = p.problem();
    let op = problem.grid.laplacian()?;
    steps
        .iter()
        .map(|&m| {
            let w: BaseWeights =
                from_lirk_params(LirkParams::CRANK_NICOLSON, &op, problem.terminal_time, m)?;
            report_row(
                format!("cn M={m}"),
                |x: &DMatrix<f64>| base_model::forward(&w, problem.nonlinearity, x),
                test,
                0,
                0.0,
                p.eval_batch(),
            )
        })
        .collect()
}

/// Trains `ann_runs` plain networks and reports the one best on selection.
pub fn ann_row(cfg: &CliConfig, splits: &Splits) -> Result<ReportRow> {
    let p = cfg.problem;
    let spec = MlpSpec::new(p.ann_widths())?;
    let steps = cfg.effective().ann_steps;
    let t0 = Instant::now();
    let mut best: Option<(f64, Arc<MlpWeights>)> = None;
    for k in 0..cfg.baseline.ann_runs as u64 {
        let theta0 = glorot_uniform_init(&spec, &mut split(cfg.seed, Domain::Baseline, 2 * k));
        let tcfg = TrainConfig {
            steps,
            seed: derive_seed(cfg.seed, Domain::Baseline, 2 * k + 1),
            ..cfg.baseline.ann.clone()
        };
        let (theta, _) = train_mlp(theta0, &splits.train, &splits.validation, &tcfg)?;
        let sel = &splits.selection;
        let loss = if sel.is_empty() {
            0.0
        } else {
            mean_seminorm_sq(&(mlp_forward(&theta, &sel.inputs)? - &sel.targets))
        };
        if best.as_ref().is_none_or(|(l, _)| loss < *l) {
            best = Some((loss, Arc::new(theta)));
        }
    }
    let train_seconds = t0.elapsed().as_secs_f64();
    let (_, theta) = best.context("no ANN run")?;
    report_row(
        "ann",
        |x: &DMatrix<f64>| mlp_forward(&theta, x),
        &splits.test,
        theta.param_count(),
        train_seconds,
        p.eval_batch(),
    )
}

pub fn baseline(cfg: &CliConfig, method: Method, data: &Path, out: &Path) -> Result<Vec<ReportRow>> {
    let splits = load_splits(cfg, data)?;
    prepare_dir(out, cfg)?;
    let rows = match method {
        Method::Cn => cn_rows(cfg, &cfg.baseline_steps(), &splits.test)?,
        Method::Ann => vec![ann_row(cfg, &splits)?],
    };
    report::save_rows(&rows, &out.join("report.csv"))?;
    Ok(rows)
}

/// Merges report files into one table.
pub fn report(runs: &[PathBuf], baselines: &[PathBuf], out: &Path) -> Result<Vec<ReportRow>> {
    let load = |paths: &[PathBuf]| -> Result<Vec<ReportRow>> {
        let mut rows = vec![];
        for p in paths {
            rows.extend(report::load_rows(p)?);
        }
        Ok(rows)
    };
    let rows = report::merge(load(runs)?, load(baselines)?);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    report::save_rows(&rows, out)?;
    Ok(rows)
}
