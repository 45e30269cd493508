//! Losses, the full model, ADAM with a plateau/batch-growth schedule, error-scale
//! estimation and error reports.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::base_model::{self, BaseWeights};
use crate::dataset_io::SampleSet;
use crate::difference_model::{mlp_backward, mlp_forward, mlp_forward_with_tape, MlpWeights};
use crate::error::{check_dim, invalid, Error, Result};
use crate::pde_problems::{column_seminorms_sq, Nonlinearity};

/// Flat view of a model's trainable tensors, in a fixed order.
pub trait Parameters: Clone {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

impl Parameters for BaseWeights {
    fn tensors(&self) -> Vec<&[f64]> {
        self.blocks().iter().flatten().map(|m| m.as_slice()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.blocks_mut()
            .iter_mut()
            .flatten()
            .map(|m| m.as_mut_slice())
            .collect()
    }
}

impl Parameters for MlpWeights {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<P: Parameters>(params: &P) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            v: zeros.clone(),
            m: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Bias-corrected ADAM update of `params` in place.
pub fn adam_step<P: Parameters>(
    state: &mut AdamState,
    params: &mut P,
    grads: &P,
    lr: f64,
) -> Result<()> {
    let g = grads.tensors();
    let mut p = params.tensors_mut();
    check_dim("optimizer tensors", state.m.len(), p.len())?;
    check_dim("gradient tensors", p.len(), g.len())?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (((p, g), m), v) in p.iter_mut().zip(&g).zip(&mut state.m).zip(&mut state.v) {
        check_dim("parameter tensor", m.len(), p.len())?;
        check_dim("gradient tensor", m.len(), g.len())?;
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Optimizer schedule. The batch size starts at `initial_batch` and doubles after
/// every quarter of `steps` (capped at `max_batch`); the learning rate is multiplied
/// by `decay_factor` when the validation loss has not improved by
/// `min_relative_improvement` for `patience` consecutive evaluations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub patience: usize,
    pub min_relative_improvement: f64,
    pub initial_batch: usize,
    pub max_batch: usize,
    pub steps: usize,
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            decay_factor: 0.3,
            patience: 5,
            min_relative_improvement: 0.01,
            initial_batch: 64,
            max_batch: 1024,
            steps: 2000,
            eval_interval: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.decay_factor > 0.0
            && self.decay_factor <= 1.0
            && self.patience > 0
            && self.min_relative_improvement >= 0.0
            && self.initial_batch > 0
            && self.max_batch >= self.initial_batch
            && self.eval_interval > 0;
        if positive {
            Ok(())
        } else {
            Err(invalid(format!("invalid training configuration {self:?}")))
        }
    }

    pub fn batch_size(&self, step: usize) -> usize {
        let quarter = (self.steps / 4).max(1);
        let doublings = (step / quarter).min(3) as u32;
        (self.initial_batch << doublings).min(self.max_batch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Mean mini-batch loss since the previous evaluation (NaN at step 0).
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub curve: Vec<CurvePoint>,
    pub initial_validation: f64,
    pub best_validation: f64,
    pub best_step: usize,
    pub steps_completed: usize,
    pub diverged: bool,
}

/// Mini-batch ADAM loop with best-so-far checkpointing on validation loss. The
/// starting point is itself a checkpoint candidate.
fn optimize<P, G, V>(
    init: P,
    n_train: usize,
    cfg: &TrainConfig,
    mut grad: G,
    validate: V,
) -> Result<(P, TrainOutcome)>
where
    P: Parameters,
    G: FnMut(&P, &[usize]) -> Result<(f64, P)>,
    V: Fn(&P) -> Result<f64>,
{
    cfg.validate()?;
    if n_train == 0 {
        return Err(Error::Empty("training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init;
    let initial = validate(&params)?;
    let mut best = params.clone();
    let mut out = TrainOutcome {
        curve: vec![CurvePoint {
            step: 0,
            learning_rate: cfg.learning_rate,
            batch_size: cfg.batch_size(0),
            train_loss: f64::NAN,
            validation_loss: initial,
        }],
        initial_validation: initial,
        best_validation: initial,
        best_step: 0,
        steps_completed: 0,
        diverged: !initial.is_finite(),
    };
    if out.diverged {
        return Ok((best, out));
    }
    let mut state = AdamState::new(&params);
    let mut lr = cfg.learning_rate;
    let mut plateau_ref = initial;
    let mut stale = 0;
    let (mut running, mut running_n) = (0.0, 0usize);
    let mut idx = Vec::with_capacity(cfg.max_batch);
    for step in 1..=cfg.steps {
        let b = cfg.batch_size(step - 1);
        idx.clear();
        idx.extend((0..b).map(|_| rng.random_range(0..n_train)));
        let (loss, g) = grad(&params, &idx)?;
        out.steps_completed = step;
        if !loss.is_finite() || !g.is_finite() {
            out.diverged = true;
            break;
        }
        adam_step(&mut state, &mut params, &g, lr)?;
        running += loss;
        running_n += 1;

        if step % cfg.eval_interval == 0 || step == cfg.steps {
            let val = validate(&params)?;
            out.curve.push(CurvePoint {
                step,
                learning_rate: lr,
                batch_size: b,
                train_loss: running / running_n as f64,
                validation_loss: val,
            });
            (running, running_n) = (0.0, 0);
            if !val.is_finite() {
                out.diverged = true;
                break;
            }
            if val < out.best_validation {
                out.best_validation = val;
                out.best_step = step;
                best = params.clone();
            }
            if val < plateau_ref * (1.0 - cfg.min_relative_improvement) {
                plateau_ref = val;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    lr *= cfg.decay_factor;
                    stale = 0;
                    plateau_ref = plateau_ref.min(val);
                }
            }
        }
    }
    Ok((best, out))
}

// Columns per chunk when a large set is pushed through a model.
const EVAL_CHUNK: usize = 512;

/// Applies `model` to fixed-size column chunks, in parallel, and reassembles.
pub fn map_columns<F>(input: &DMatrix<f64>, out_rows: usize, model: F) -> Result<DMatrix<f64>>
where
    F: Fn(&DMatrix<f64>) -> Result<DMatrix<f64>> + Sync,
{
    let n = input.ncols();
    let starts: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
    let parts: Vec<DMatrix<f64>> = starts
        .par_iter()
        .map(|&s| {
            let w = EVAL_CHUNK.min(n - s);
            model(&input.columns(s, w).into_owned())
        })
        .collect::<Result<_>>()?;
    let mut out = DMatrix::zeros(out_rows, n);
    for (&s, part) in starts.iter().zip(&parts) {
        check_dim("model output rows", out_rows, part.nrows())?;
        out.columns_mut(s, part.ncols()).copy_from(part);
    }
    Ok(out)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean squared seminorm of the columns of `err`.
pub fn mean_seminorm_sq(err: &DMatrix<f64>) -> f64 {
    mean(&column_seminorms_sq(err))
}

fn check_pair(input: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<()> {
    check_dim("sample count", input.ncols(), target.ncols())?;
    if input.ncols() == 0 {
        return Err(Error::Empty("batch"));
    }
    Ok(())
}

/// Batch-mean of `seminorm^2(B(W, x) - y)` and its gradient in `W`.
pub fn base_loss(
    w: &BaseWeights,
    f: Nonlinearity,
    input: &DMatrix<f64>,
    target: &DMatrix<f64>,
) -> Result<(f64, BaseWeights)> {
    check_pair(input, target)?;
    check_dim("target rows", w.dim(), target.nrows())?;
    let (pred, tape) = base_model::forward_with_tape(w, f, input)?;
    let err = pred - target;
    let loss = mean_seminorm_sq(&err);
    let scale = 2.0 / (err.nrows() * err.ncols()) as f64;
    let g = base_model::backward(w, f, &tape, &(err * scale))?;
    Ok((loss, g.weights))
}

pub fn base_loss_value(
    w: &BaseWeights,
    f: Nonlinearity,
    input: &DMatrix<f64>,
    target: &DMatrix<f64>,
) -> Result<f64> {
    check_pair(input, target)?;
    let pred = map_columns(input, w.dim(), |x| base_model::forward(w, f, x))?;
    Ok(mean_seminorm_sq(&(pred - target)))
}

/// `(y - B(W, x)) / eps`
pub fn residual_targets(
    w: &BaseWeights,
    f: Nonlinearity,
    eps: f64,
    input: &DMatrix<f64>,
    target: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(invalid(format!("error scale must be positive, got {eps}")));
    }
    check_pair(input, target)?;
    let pred = map_columns(input, w.dim(), |x| base_model::forward(w, f, x))?;
    Ok((target - pred) / eps)
}

/// Batch-mean of `seminorm^2(D(theta, x) - r)` and its gradient in `theta`.
pub fn regression_loss(
    theta: &MlpWeights,
    input: &DMatrix<f64>,
    target: &DMatrix<f64>,
) -> Result<(f64, MlpWeights)> {
    check_pair(input, target)?;
    check_dim("target rows", theta.output_dim(), target.nrows())?;
    let (pred, tape) = mlp_forward_with_tape(theta, input)?;
    let err = pred - target;
    let loss = mean_seminorm_sq(&err);
    let scale = 2.0 / (err.nrows() * err.ncols()) as f64;
    let g = mlp_backward(theta, &tape, &(err * scale))?;
    Ok((loss, g.weights))
}

pub fn regression_loss_value(
    theta: &MlpWeights,
    input: &DMatrix<f64>,
    target: &DMatrix<f64>,
) -> Result<f64> {
    check_pair(input, target)?;
    let pred = map_columns(input, theta.output_dim(), |x| mlp_forward(theta, x))?;
    Ok(mean_seminorm_sq(&(pred - target)))
}

/// Difference-model loss with the base weights and `eps` held fixed.
pub fn diff_loss(
    theta: &MlpWeights,
    w: &BaseWeights,
    f: Nonlinearity,
    eps: f64,
    input: &DMatrix<f64>,
    target: &DMatrix<f64>,
) -> Result<(f64, MlpWeights)> {
    regression_loss(theta, input, &residual_targets(w, f, eps, input, target)?)
}

/// Smallest error scale handed out; keeps the residual targets finite.
pub const ERROR_SCALE_FLOOR: f64 = 1e-12;

/// Root mean squared seminorm error of the base model on the first `n_mc` samples.
pub fn estimate_error_scale(
    w: &BaseWeights,
    f: Nonlinearity,
    set: &SampleSet,
    n_mc: usize,
) -> Result<f64> {
    if set.is_empty() || n_mc == 0 {
        return Err(Error::Empty("error-scale sample"));
    }
    if n_mc > set.len() {
        return Err(invalid(format!(
            "error-scale sample of {n_mc} exceeds the {} available",
            set.len()
        )));
    }
    let sub = set.slice(0..n_mc);
    let ms = base_loss_value(w, f, &sub.inputs, &sub.targets)?;
    Ok(ms.sqrt().max(ERROR_SCALE_FLOOR))
}

/// `B(W, x) + eps * D(theta, x)`
pub fn full_model_eval(
    w: &BaseWeights,
    f: Nonlinearity,
    theta: &MlpWeights,
    eps: f64,
    input: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    map_columns(input, w.dim(), |x| {
        let base = base_model::forward(w, f, x)?;
        if eps == 0.0 {
            return Ok(base);
        }
        let d = mlp_forward(theta, x)?;
        check_dim("difference output", base.nrows(), d.nrows())?;
        Ok(base + d * eps)
    })
}

pub fn train_base(
    w0: BaseWeights,
    f: Nonlinearity,
    train: &SampleSet,
    validation: &SampleSet,
    cfg: &TrainConfig,
) -> Result<(BaseWeights, TrainOutcome)> {
    if validation.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    optimize(
        w0,
        train.len(),
        cfg,
        |w, idx| {
            let (x, y) = train.gather(idx);
            base_loss(w, f, &x, &y)
        },
        |w| base_loss_value(w, f, &validation.inputs, &validation.targets),
    )
}

/// Plain regression of `train.targets` on `train.inputs`.
pub fn train_mlp(
    theta0: MlpWeights,
    train: &SampleSet,
    validation: &SampleSet,
    cfg: &TrainConfig,
) -> Result<(MlpWeights, TrainOutcome)> {
    if validation.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    optimize(
        theta0,
        train.len(),
        cfg,
        |t, idx| {
            let (x, y) = train.gather(idx);
            regression_loss(t, &x, &y)
        },
        |t| regression_loss_value(t, &validation.inputs, &validation.targets),
    )
}

#[derive(Clone, Debug)]
pub struct DifferenceOutcome {
    pub training: TrainOutcome,
    /// Validation loss of the zero network, i.e. of the base model alone, in
    /// residual units.
    pub zero_validation: f64,
    /// True when the trained network lost to the zero network and was replaced by it.
    pub fell_back: bool,
}

/// Trains the difference model on `(y - B(W, x)) / eps` with `W`, `eps` frozen.
/// If the result does not beat the zero network on validation, the zero network
/// is returned, so the full model is never worse than the base model there.
pub fn train_difference(
    theta0: MlpWeights,
    w: &BaseWeights,
    f: Nonlinearity,
    eps: f64,
    train: &SampleSet,
    validation: &SampleSet,
    cfg: &TrainConfig,
) -> Result<(MlpWeights, DifferenceOutcome)> {
    let train_r = SampleSet::new(
        train.inputs.clone(),
        residual_targets(w, f, eps, &train.inputs, &train.targets)?,
    )?;
    let val_r = SampleSet::new(
        validation.inputs.clone(),
        residual_targets(w, f, eps, &validation.inputs, &validation.targets)?,
    )?;
    let zero_validation = mean_seminorm_sq(&val_r.targets);
    let (theta, training) = train_mlp(theta0, &train_r, &val_r, cfg)?;
    let fell_back = !(training.best_validation <= zero_validation);
    let theta = if fell_back {
        let widths = theta.widths();
        let spec = crate::difference_model::MlpSpec { widths };
        MlpWeights::zeros(&spec)
    } else {
        theta
    };
    Ok((
        theta,
        DifferenceOutcome {
            training,
            zero_validation,
            fell_back,
        },
    ))
}

/// Error estimates of a model over a held-out set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    /// Mean seminorm error.
    pub l1: f64,
    /// Root mean squared seminorm error.
    pub l2: f64,
    pub samples: usize,
    pub params: usize,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

/// Evaluates `model` on every sample of `set`. Parameter count and training time
/// are left for the caller to fill in.
pub fn evaluate<F>(model: F, set: &SampleSet) -> Result<ErrorReport>
where
    F: Fn(&DMatrix<f64>) -> Result<DMatrix<f64>> + Sync,
{
    if set.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let t0 = Instant::now();
    let pred = map_columns(&set.inputs, set.targets.nrows(), &model)?;
    let eval_seconds = t0.elapsed().as_secs_f64();
    Ok(report_from_errors(&(pred - &set.targets), eval_seconds))
}

pub fn report_from_errors(err: &DMatrix<f64>, eval_seconds: f64) -> ErrorReport {
    let sq = column_seminorms_sq(err);
    let l1 = mean(&sq.iter().map(|v| v.sqrt()).collect::<Vec<_>>());
    let l2 = mean(&sq).sqrt();
    ErrorReport {
        // Guard the Jensen ordering against the last ulp of rounding.
        l1: l1.min(l2),
        l2,
        samples: err.ncols(),
        params: 0,
        train_seconds: 0.0,
        eval_seconds,
    }
}

/// Wall-clock time of pushing `batch` copies of the first input through `model`.
pub fn time_evaluations<F>(model: F, set: &SampleSet, batch: usize) -> Result<f64>
where
    F: Fn(&DMatrix<f64>) -> Result<DMatrix<f64>> + Sync,
{
    if set.is_empty() {
        return Err(Error::Empty("timing set"));
    }
    let x = DMatrix::from_fn(set.inputs.nrows(), batch, |i, j| set.inputs[(i, j % set.len())]);
    let t0 = Instant::now();
    map_columns(&x, set.targets.nrows(), &model)?;
    Ok(t0.elapsed().as_secs_f64())
}
