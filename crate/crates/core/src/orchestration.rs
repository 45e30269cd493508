//! Multi-run machinery: grid sweeps over scheme parameters, the adaptive
//! explore/exploit sweep, and selection of the best run on held-out data.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::base_model::{from_lirk_params, BaseWeights};
use crate::dataset_io::{SampleSet, Splits};
use crate::difference_model::{glorot_uniform_init, MlpSpec, MlpWeights};
use crate::error::{invalid, Error, Result};
use crate::grid_operators::LinearOperator;
use crate::lirk::LirkParams;
use crate::pde_problems::{Preset, ProblemSpec};
use crate::rng::{derive_seed, split, Domain};
use crate::training::{
    base_loss_value, estimate_error_scale, full_model_eval, mean_seminorm_sq, train_base,
    train_difference, TrainConfig,
};

/// Problem and architecture shared by every run of a sweep.
#[derive(Clone, Debug)]
pub struct ModelSetup {
    pub problem: ProblemSpec,
    pub blocks: usize,
    pub difference: MlpSpec,
    operator: Arc<LinearOperator>,
}

impl ModelSetup {
    pub fn new(problem: ProblemSpec, blocks: usize, difference: MlpSpec) -> Result<Self> {
        let d = problem.grid.unknowns();
        if difference.input_dim() != d || difference.output_dim() != d {
            return Err(invalid(format!(
                "difference network widths {:?} do not match {d} unknowns",
                difference.widths
            )));
        }
        if blocks == 0 {
            return Err(invalid("base model needs at least one block"));
        }
        Ok(Self {
            operator: Arc::new(problem.grid.laplacian()?),
            problem,
            blocks,
            difference,
        })
    }

    pub fn from_preset(p: Preset) -> Result<Self> {
        Self::new(p.problem(), p.base_blocks(), MlpSpec::new(p.difference_widths())?)
    }

    pub fn operator(&self) -> &LinearOperator {
        &self.operator
    }

    pub fn initial_weights(&self, p: LirkParams) -> Result<BaseWeights> {
        from_lirk_params(p, &self.operator, self.problem.terminal_time, self.blocks)
    }
}

/// Training knobs of a sweep. Every random stream derives from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub base: TrainConfig,
    pub difference: TrainConfig,
    /// Training samples used to estimate the error scale.
    pub error_scale_samples: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            base: TrainConfig {
                learning_rate: 1e-4,
                ..TrainConfig::default()
            },
            difference: TrainConfig::default(),
            error_scale_samples: 2048,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepMode {
    Grid,
    Adaptive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub mode: SweepMode,
    /// Points of a grid sweep.
    pub grid: Vec<LirkParams>,
    /// `([p1_lo, p1_hi], [p2_lo, p2_hi])` for the adaptive sweep.
    pub sampling_box: ([f64; 2], [f64; 2]),
    pub runs: usize,
    /// Probability that a later adaptive run reuses the best base model.
    pub exploit_probability: f64,
}

impl SweepPlan {
    pub fn grid(points: Vec<LirkParams>) -> Self {
        Self {
            mode: SweepMode::Grid,
            runs: points.len(),
            grid: points,
            sampling_box: ([0.1, 0.9], [0.1, 0.9]),
            exploit_probability: 0.5,
        }
    }

    pub fn adaptive(sampling_box: ([f64; 2], [f64; 2]), runs: usize, exploit_probability: f64) -> Self {
        Self {
            mode: SweepMode::Adaptive,
            grid: vec![],
            sampling_box,
            runs,
            exploit_probability,
        }
    }

    pub fn for_preset(p: Preset, mode: SweepMode, runs: usize) -> Self {
        match mode {
            SweepMode::Grid => Self::grid(p.sweep_grid()),
            SweepMode::Adaptive => Self::adaptive(p.adaptive_box(), runs, 0.5),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            SweepMode::Grid => {
                if self.grid.is_empty() {
                    return Err(invalid("grid sweep needs at least one point"));
                }
                self.grid.iter().try_for_each(LirkParams::validate)
            }
            SweepMode::Adaptive => {
                let ([a, b], [c, d]) = self.sampling_box;
                if self.runs == 0 {
                    return Err(invalid("adaptive sweep needs at least one run"));
                }
                if !(0.0 < a && a <= b && 0.0 < c && c <= d && b.is_finite() && d.is_finite()) {
                    return Err(invalid(format!("bad sampling box {:?}", self.sampling_box)));
                }
                if !(0.0..=1.0).contains(&self.exploit_probability) {
                    return Err(invalid("exploit probability must lie in [0, 1]"));
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunAction {
    /// Fresh base model from the run's parameters, then a difference model.
    Full,
    /// New difference model on the base model of an earlier run (1-based index).
    Reuse { base_run: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunStatus {
    Ok,
    Diverged,
    Failed(String),
}

impl std::fmt::Display for RunStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Ok => f.write_str("ok"),
            Self::Diverged => f.write_str("diverged"),
            Self::Failed(m) => write!(f, "failed: {m}"),
        }
    }
}

/// Held-out losses (mean squared seminorm) used for selection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectionScore {
    pub base: f64,
    pub full: f64,
}

/// One run of a sweep. Errors are validation-split L2 errors.
#[derive(Clone, Debug)]
pub struct RunRecord {
    /// 1-based.
    pub run: usize,
    pub params: LirkParams,
    pub action: RunAction,
    pub init_l2: f64,
    pub base_l2: f64,
    pub full_l2: f64,
    pub epsilon: f64,
    pub status: RunStatus,
    pub base_best_step: usize,
    /// The trained difference network lost to zero and was replaced by it.
    pub difference_fell_back: bool,
    pub selection: Option<SelectionScore>,
    pub base: Option<Arc<BaseWeights>>,
    pub difference: Option<Arc<MlpWeights>>,
}

impl RunRecord {
    fn failed(run: usize, params: LirkParams, action: RunAction, err: &Error) -> Self {
        Self {
            run,
            params,
            action,
            init_l2: f64::INFINITY,
            base_l2: f64::INFINITY,
            full_l2: f64::INFINITY,
            epsilon: f64::NAN,
            status: RunStatus::Failed(err.to_string()),
            base_best_step: 0,
            difference_fell_back: false,
            selection: None,
            base: None,
            difference: None,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == RunStatus::Ok
    }

    /// Full-model selection loss; `+inf` for runs that cannot be selected.
    pub fn selection_loss(&self) -> f64 {
        match (&self.status, self.selection) {
            (RunStatus::Ok, Some(s)) if s.full.is_finite() => s.full,
            _ => f64::INFINITY,
        }
    }

    /// Full-model validation loss; `+inf` for runs that cannot be reused.
    fn validation_loss(&self) -> f64 {
        if self.is_ok() && self.base.is_some() {
            self.full_l2
        } else {
            f64::INFINITY
        }
    }
}

/// Index of the smallest loss, ties to the lowest index; NaN counts as `+inf`.
pub fn argmin_run(losses: &[f64]) -> Option<usize> {
    let key = |v: f64| if v.is_nan() { f64::INFINITY } else { v };
    let mut best: Option<usize> = None;
    for (i, &l) in losses.iter().enumerate() {
        if best.is_none_or(|b| key(l) < key(losses[b])) {
            best = Some(i);
        }
    }
    best
}

fn score(
    setup: &ModelSetup,
    base: &BaseWeights,
    theta: &MlpWeights,
    eps: f64,
    set: &SampleSet,
) -> Result<SelectionScore> {
    let f = setup.problem.nonlinearity;
    let b = base_loss_value(base, f, &set.inputs, &set.targets)?;
    let full = full_model_eval(base, f, theta, eps, &set.inputs)?;
    Ok(SelectionScore {
        base: b,
        full: mean_seminorm_sq(&(full - &set.targets)),
    })
}

/// Trains a difference model on a fixed base model and fills the record's
/// difference fields. Falls back to the zero network whenever it does not beat the
/// base model on validation.
fn attach_difference(
    rec: &mut RunRecord,
    setup: &ModelSetup,
    base: &Arc<BaseWeights>,
    eps: f64,
    splits: &Splits,
    cfg: &SweepConfig,
) -> Result<()> {
    let f = setup.problem.nonlinearity;
    let r = rec.run as u64;
    let theta0 = glorot_uniform_init(&setup.difference, &mut split(cfg.seed, Domain::DifferenceInit, r));
    let dcfg = TrainConfig {
        seed: derive_seed(cfg.seed, Domain::DifferenceTraining, r),
        ..cfg.difference.clone()
    };
    let (mut theta, outcome) =
        train_difference(theta0, base, f, eps, &splits.train, &splits.validation, &dcfg)?;
    let val = &splits.validation;
    let full = full_model_eval(base, f, &theta, eps, &val.inputs)?;
    let mut full_l2 = mean_seminorm_sq(&(full - &val.targets)).sqrt();
    let mut fell_back = outcome.fell_back;
    if !(full_l2 <= rec.base_l2) {
        theta = MlpWeights::zeros(&setup.difference);
        full_l2 = rec.base_l2;
        fell_back = true;
    }
    rec.full_l2 = full_l2;
    rec.difference_fell_back = fell_back;
    rec.selection = Some(score(setup, base, &theta, eps, &splits.selection)?);
    rec.difference = Some(Arc::new(theta));
    selection_fallback(rec, setup);
    Ok(())
}

/// Replaces the difference network by zero if it loses to the base model on the
/// selection split.
fn selection_fallback(r: &mut RunRecord, setup: &ModelSetup) {
    if let Some(s) = r.selection {
        if !(s.full <= s.base) {
            r.selection = Some(SelectionScore {
                base: s.base,
                full: s.base,
            });
            r.difference = Some(Arc::new(MlpWeights::zeros(&setup.difference)));
            r.full_l2 = r.base_l2;
            r.difference_fell_back = true;
        }
    }
}

/// Pipeline (A): initialize from `p`, train the base model, estimate the error
/// scale, train a difference model.
pub fn run_full_pipeline(
    run: usize,
    p: LirkParams,
    setup: &ModelSetup,
    splits: &Splits,
    cfg: &SweepConfig,
) -> RunRecord {
    let go = || -> Result<RunRecord> {
        let f = setup.problem.nonlinearity;
        let w0 = setup.initial_weights(p)?;
        let bcfg = TrainConfig {
            seed: derive_seed(cfg.seed, Domain::BaseTraining, run as u64),
            ..cfg.base.clone()
        };
        let (w, outcome) = train_base(w0, f, &splits.train, &splits.validation, &bcfg)?;
        let mut rec = RunRecord {
            run,
            params: p,
            action: RunAction::Full,
            init_l2: outcome.initial_validation.sqrt(),
            base_l2: outcome.best_validation.sqrt(),
            full_l2: outcome.best_validation.sqrt(),
            epsilon: f64::NAN,
            status: RunStatus::Ok,
            base_best_step: outcome.best_step,
            difference_fell_back: false,
            selection: None,
            base: None,
            difference: None,
        };
        if outcome.diverged {
            rec.status = RunStatus::Diverged;
            rec.base = Some(Arc::new(w));
            return Ok(rec);
        }
        let n_mc = cfg.error_scale_samples.min(splits.train.len());
        let eps = estimate_error_scale(&w, f, &splits.train, n_mc)?;
        rec.epsilon = eps;
        let w = Arc::new(w);
        attach_difference(&mut rec, setup, &w, eps, splits, cfg)?;
        rec.base = Some(w);
        Ok(rec)
    };
    go().unwrap_or_else(|e| RunRecord::failed(run, p, RunAction::Full, &e))
}

/// Pipeline (B): a fresh difference model on the base model of `source`.
pub fn run_reuse_pipeline(
    run: usize,
    source: &RunRecord,
    setup: &ModelSetup,
    splits: &Splits,
    cfg: &SweepConfig,
) -> RunRecord {
    let action = RunAction::Reuse {
        base_run: source.run,
    };
    let go = || -> Result<RunRecord> {
        let base = source
            .base
            .clone()
            .ok_or_else(|| invalid("source run kept no base model"))?;
        let mut rec = RunRecord {
            run,
            action,
            difference: None,
            selection: None,
            difference_fell_back: false,
            full_l2: source.base_l2,
            ..source.clone()
        };
        attach_difference(&mut rec, setup, &base, source.epsilon, splits, cfg)?;
        rec.base = Some(base);
        Ok(rec)
    };
    go().unwrap_or_else(|e| RunRecord::failed(run, source.params, action, &e))
}

/// Drops weights no later step can need: everything except the current
/// selection leader and (for reuse) the best validation model.
fn prune(records: &mut [RunRecord]) {
    let sel = argmin_run(&records.iter().map(RunRecord::selection_loss).collect::<Vec<_>>());
    let val = argmin_run(&records.iter().map(RunRecord::validation_loss).collect::<Vec<_>>());
    for (i, r) in records.iter_mut().enumerate() {
        if Some(i) != sel && Some(i) != val {
            r.base = None;
            r.difference = None;
        }
    }
}

/// Runs the full pipeline at every grid point. Runs are independent and execute
/// in parallel; results do not depend on the worker count.
pub fn grid_sweep(
    plan: &SweepPlan,
    setup: &ModelSetup,
    splits: &Splits,
    cfg: &SweepConfig,
    on_run: &(dyn Fn(&RunRecord) + Sync),
) -> Result<Vec<RunRecord>> {
    plan.validate()?;
    if plan.mode != SweepMode::Grid {
        return Err(invalid("grid_sweep needs a grid plan"));
    }
    let wave = rayon::current_num_threads().max(1);
    let mut records: Vec<RunRecord> = Vec::with_capacity(plan.grid.len());
    for (w, chunk) in plan.grid.chunks(wave).enumerate() {
        let done: Vec<RunRecord> = chunk
            .par_iter()
            .enumerate()
            .map(|(i, &p)| {
                let r = run_full_pipeline(w * wave + i + 1, p, setup, splits, cfg);
                on_run(&r);
                r
            })
            .collect();
        records.extend(done);
        prune(&mut records);
    }
    Ok(records)
}

/// Run 1 performs (A). Each later run performs (B) on the base model with the best
/// full-model validation error with probability `exploit_probability`, and (A)
/// with a uniformly drawn parameter otherwise.
pub fn adaptive_sweep(
    plan: &SweepPlan,
    setup: &ModelSetup,
    splits: &Splits,
    cfg: &SweepConfig,
    on_run: &(dyn Fn(&RunRecord) + Sync),
) -> Result<Vec<RunRecord>> {
    plan.validate()?;
    if plan.mode != SweepMode::Adaptive {
        return Err(invalid("adaptive_sweep needs an adaptive plan"));
    }
    let ([a, b], [c, d]) = plan.sampling_box;
    let mut records: Vec<RunRecord> = Vec::with_capacity(plan.runs);
    for run in 1..=plan.runs {
        let exploit = run > 1
            && split(cfg.seed, Domain::SweepDecision, run as u64).random::<f64>()
                < plan.exploit_probability;
        let source = argmin_run(&records.iter().map(RunRecord::validation_loss).collect::<Vec<_>>())
            .filter(|&i| records[i].validation_loss().is_finite());
        let rec = match (exploit, source) {
            (true, Some(i)) => run_reuse_pipeline(run, &records[i], setup, splits, cfg),
            _ => {
                let mut rng = split(cfg.seed, Domain::SweepParameter, run as u64);
                let p = LirkParams {
                    p1: rng.random_range(a..=b),
                    p2: rng.random_range(c..=d),
                };
                run_full_pipeline(run, p, setup, splits, cfg)
            }
        };
        on_run(&rec);
        records.push(rec);
        prune(&mut records);
    }
    Ok(records)
}

/// Dispatches on the plan's mode. `on_run` sees every finished run.
pub fn run_sweep(
    plan: &SweepPlan,
    setup: &ModelSetup,
    splits: &Splits,
    cfg: &SweepConfig,
    on_run: &(dyn Fn(&RunRecord) + Sync),
) -> Result<Vec<RunRecord>> {
    match plan.mode {
        SweepMode::Grid => grid_sweep(plan, setup, splits, cfg, on_run),
        SweepMode::Adaptive => adaptive_sweep(plan, setup, splits, cfg, on_run),
    }
}

/// Chooses the run with the smallest full-model loss on `selection`, ties to the
/// lowest run index. Records without a score are scored here if they still hold
/// their weights. Any run whose difference network loses to its base model on
/// `selection` has it replaced by the zero network first, so the selected full
/// model is never worse than its base model on that split.
pub fn select_best_run(
    records: &mut [RunRecord],
    setup: &ModelSetup,
    selection: &SampleSet,
) -> Result<usize> {
    if records.is_empty() {
        return Err(Error::Empty("run records"));
    }
    for r in records.iter_mut() {
        if !r.is_ok() {
            continue;
        }
        if r.selection.is_none() {
            if let (Some(b), Some(t)) = (&r.base, &r.difference) {
                r.selection = Some(score(setup, b, t, r.epsilon, selection)?);
            }
        }
        selection_fallback(r, setup);
    }
    let losses: Vec<f64> = records.iter().map(RunRecord::selection_loss).collect();
    argmin_run(&losses).ok_or(Error::Empty("run records"))
}

fn fmt(v: f64) -> String {
    format!("{v:e}")
}

/// Run log, one row per run.
pub fn write_runs_csv<W: Write>(records: &[RunRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["run", "p1", "p2", "init_L2", "base_L2", "full_L2", "epsilon", "status"])?;
    for r in records {
        w.write_record([
            r.run.to_string(),
            r.params.p1.to_string(),
            r.params.p2.to_string(),
            fmt(r.init_l2),
            fmt(r.base_l2),
            fmt(r.full_l2),
            fmt(r.epsilon),
            r.status.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Which action each run took.
pub fn write_actions_csv<W: Write>(records: &[RunRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["run", "action", "base_run"])?;
    for r in records {
        let (a, b) = match r.action {
            RunAction::Full => ("A", r.run),
            RunAction::Reuse { base_run } => ("B", base_run),
        };
        w.write_record([r.run.to_string(), a.to_string(), b.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Long-format heatmap: one row per grid point.
pub fn write_heatmap_csv<W: Write>(records: &[RunRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["p1", "p2", "init_L2", "base_L2", "full_L2"])?;
    for r in records {
        w.write_record([
            r.params.p1.to_string(),
            r.params.p2.to_string(),
            fmt(r.init_l2),
            fmt(r.base_l2),
            fmt(r.full_l2),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One heatmap panel as a matrix: rows are `p2` values, columns `p1` values.
pub fn write_heatmap_pivot<W: Write>(
    records: &[RunRecord],
    value: impl Fn(&RunRecord) -> f64,
    out: W,
) -> Result<()> {
    let mut p1s: Vec<f64> = records.iter().map(|r| r.params.p1).collect();
    let mut p2s: Vec<f64> = records.iter().map(|r| r.params.p2).collect();
    for v in [&mut p1s, &mut p2s] {
        v.sort_by(f64::total_cmp);
        v.dedup();
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["p2\\p1".to_string()];
    header.extend(p1s.iter().map(|p| p.to_string()));
    w.write_record(&header)?;
    for &p2 in &p2s {
        let mut row = vec![p2.to_string()];
        for &p1 in &p1s {
            let cell = records
                .iter()
                .find(|r| r.params.p1 == p1 && r.params.p2 == p2)
                .map(|r| fmt(value(r)))
                .unwrap_or_default();
            row.push(cell);
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `heatmap.csv` and the three pivot panels into `dir`.
pub fn write_heatmaps(records: &[RunRecord], dir: &Path) -> Result<()> {
    write_heatmap_csv(records, std::fs::File::create(dir.join("heatmap.csv"))?)?;
    let panels: [(&str, fn(&RunRecord) -> f64); 3] = [
        ("heatmap_init.csv", |r| r.init_l2),
        ("heatmap_base.csv", |r| r.base_l2),
        ("heatmap_full.csv", |r| r.full_l2),
    ];
    for (name, value) in panels {
        write_heatmap_pivot(records, value, std::fs::File::create(dir.join(name))?)?;
    }
    Ok(())
}
