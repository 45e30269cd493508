//! Fully connected GELU network used for the difference model and the plain
//! network baseline.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{check_dim, invalid, Result};

/// Standard normal CDF.
#[inline]
fn phi_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

#[inline]
pub fn gelu(x: f64) -> f64 {
    x * phi_cdf(x)
}

#[inline]
pub fn gelu_prime(x: f64) -> f64 {
    phi_cdf(x) + x * (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Upper bound on `|gelu'|`; the maximum is about 1.1289, attained at `x = sqrt(2)`.
pub const GELU_LIPSCHITZ: f64 = 1.13;

/// Layer widths `(input, hidden..., output)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 3 {
            return Err(invalid(format!(
                "network needs input, output and at least one hidden width, got {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(invalid(format!("layer widths must be positive, got {widths:?}")));
        }
        Ok(Self { widths })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out x in`
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Affine layers with GELU between them and identity after the last one.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpWeights {
    pub layers: Vec<Layer>,
}

impl MlpWeights {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            check_dim("layer bias", l.weight.nrows(), l.bias.len())?;
            if i > 0 {
                check_dim("layer input", layers[i - 1].weight.nrows(), l.weight.ncols())?;
            }
        }
        Ok(Self { layers })
    }

    pub fn zeros(spec: &MlpSpec) -> Self {
        Self {
            layers: spec
                .widths
                .windows(2)
                .map(|w| Layer {
                    weight: DMatrix::zeros(w[1], w[0]),
                    bias: DVector::zeros(w[1]),
                })
                .collect(),
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].weight.ncols())
            .chain(self.layers.iter().map(|l| l.weight.nrows()))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").weight.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().all(|v| *v == 0.0) && l.bias.iter().all(|v| *v == 0.0))
    }
}

/// Entries uniform on `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`; zero biases.
pub fn glorot_uniform_init<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> MlpWeights {
    let layers = spec
        .widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
            let weight = DMatrix::from_fn(fan_out, fan_in, |_, _| dist.sample(rng));
            Layer {
                weight,
                bias: DVector::zeros(fan_out),
            }
        })
        .collect();
    MlpWeights { layers }
}

#[inline]
fn affine(l: &Layer, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut z = &l.weight * x;
    for mut col in z.column_iter_mut() {
        col += &l.bias;
    }
    z
}

pub fn mlp_forward(w: &MlpWeights, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim("network input", w.input_dim(), x.nrows())?;
    let last = w.layers.len() - 1;
    let mut h = x.clone();
    for (i, l) in w.layers.iter().enumerate() {
        let z = affine(l, &h);
        h = if i < last { z.map(gelu) } else { z };
    }
    Ok(h)
}

/// Layer inputs and hidden pre-activations of one forward pass.
#[derive(Clone, Debug)]
pub struct MlpTape {
    inputs: Vec<DMatrix<f64>>,
    pre_activations: Vec<DMatrix<f64>>,
}

pub fn mlp_forward_with_tape(
    w: &MlpWeights,
    x: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, MlpTape)> {
    check_dim("network input", w.input_dim(), x.nrows())?;
    let last = w.layers.len() - 1;
    let mut inputs = Vec::with_capacity(w.layers.len());
    let mut pre = Vec::with_capacity(last);
    let mut h = x.clone();
    for (i, l) in w.layers.iter().enumerate() {
        let z = affine(l, &h);
        inputs.push(h);
        h = if i < last {
            let a = z.map(gelu);
            pre.push(z);
            a
        } else {
            z
        };
    }
    Ok((
        h,
        MlpTape {
            inputs,
            pre_activations: pre,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct MlpGradient {
    pub weights: MlpWeights,
    pub input: DMatrix<f64>,
}

pub fn mlp_backward(w: &MlpWeights, tape: &MlpTape, cotangent: &DMatrix<f64>) -> Result<MlpGradient> {
    check_dim("tape layers", w.layers.len(), tape.inputs.len())?;
    check_dim("cotangent rows", w.output_dim(), cotangent.nrows())?;
    check_dim("cotangent columns", tape.inputs[0].ncols(), cotangent.ncols())?;
    let mut grads = Vec::with_capacity(w.layers.len());
    let mut delta = cotangent.clone();
    for (i, l) in w.layers.iter().enumerate().rev() {
        grads.push(Layer {
            weight: &delta * tape.inputs[i].transpose(),
            bias: DVector::from_iterator(delta.nrows(), delta.row_iter().map(|r| r.sum())),
        });
        let mut back = l.weight.tr_mul(&delta);
        if i > 0 {
            back.zip_apply(&tape.pre_activations[i - 1], |b, z| *b *= gelu_prime(z));
        }
        delta = back;
    }
    grads.reverse();
    Ok(MlpGradient {
        weights: MlpWeights { layers: grads },
        input: delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn randomize(w: &mut MlpWeights, rng: &mut ChaCha8Rng) {
        for l in &mut w.layers {
            l.bias = DVector::from_fn(l.bias.len(), |_, _| rng.random_range(-0.5..0.5));
        }
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_746_068_543).abs() < 1e-12);
        assert!((gelu(20.0) / 20.0 - 1.0).abs() <= 1e-12);
        assert!(gelu(-40.0).abs() < 1e-300);
    }

    #[test]
    fn gelu_derivative_and_lipschitz_bound() {
        let mut peak: f64 = 0.0;
        for i in -4000..=4000 {
            let x = i as f64 * 2e-3;
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_prime(x)).abs() < 1e-8);
            peak = peak.max(gelu_prime(x).abs());
        }
        assert!(peak <= GELU_LIPSCHITZ);
        assert!((gelu_prime(2f64.sqrt()) - peak).abs() < 1e-6);
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![4, 4]).is_err());
        assert!(MlpSpec::new(vec![4, 0, 4]).is_err());
        let s = MlpSpec::new(vec![35, 50, 150, 35]).unwrap();
        assert_eq!(s.param_count(), 35 * 50 + 50 + 50 * 150 + 150 + 150 * 35 + 35);
        assert_eq!(MlpWeights::zeros(&s).param_count(), s.param_count());
    }

    #[test]
    fn glorot_support_variance_and_determinism() {
        let spec = MlpSpec::new(vec![200, 300, 200]).unwrap();
        let w = glorot_uniform_init(&spec, &mut ChaCha8Rng::seed_from_u64(1));
        let a = (6.0f64 / 500.0).sqrt();
        let entries: Vec<f64> = w.layers.iter().flat_map(|l| l.weight.iter().copied()).collect();
        assert_eq!(entries.len(), 120_000);
        assert!(entries.iter().all(|v| v.abs() <= a));
        let var = entries.iter().map(|v| v * v).sum::<f64>() / entries.len() as f64;
        assert!((var / (a * a / 3.0) - 1.0).abs() < 0.05);
        assert!(w.layers.iter().all(|l| l.bias.iter().all(|b| *b == 0.0)));
        let again = glorot_uniform_init(&spec, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(w, again);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let spec = MlpSpec::new(vec![5, 7, 5]).unwrap();
        let w = MlpWeights::zeros(&spec);
        assert!(w.is_zero());
        let x = random(5, 3, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(mlp_forward(&w, &x).unwrap().amax(), 0.0);
    }

    #[test]
    fn single_affine_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = Layer {
            weight: random(3, 4, &mut rng),
            bias: DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)),
        };
        let w = MlpWeights::new(vec![l.clone()]).unwrap();
        let x = random(4, 1, &mut rng);
        let expect = &l.weight * &x + &l.bias;
        assert!((mlp_forward(&w, &x).unwrap() - expect).amax() < 1e-15);
    }

    #[test]
    fn shape_errors() {
        let spec = MlpSpec::new(vec![3, 4, 2]).unwrap();
        let w = MlpWeights::zeros(&spec);
        assert!(mlp_forward(&w, &DMatrix::zeros(4, 1)).is_err());
        let bad = Layer {
            weight: DMatrix::zeros(2, 3),
            bias: DVector::zeros(3),
        };
        assert!(MlpWeights::new(vec![bad]).is_err());
    }

    fn check_gradients(widths: Vec<usize>, batch: usize, seed: u64, entry_checks: Option<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = MlpSpec::new(widths).unwrap();
        let mut w = glorot_uniform_init(&spec, &mut rng);
        randomize(&mut w, &mut rng);
        let x = random(spec.input_dim(), batch, &mut rng);
        let c = random(spec.output_dim(), batch, &mut rng);
        let loss = |w: &MlpWeights| mlp_forward(w, &x).unwrap().dot(&c);
        let (out, tape) = mlp_forward_with_tape(&w, &x).unwrap();
        assert_eq!(out, mlp_forward(&w, &x).unwrap());
        let g = mlp_backward(&w, &tape, &c).unwrap();
        let h = 1e-5;
        for li in 0..w.layers.len() {
            let n = w.layers[li].weight.len();
            let picks: Vec<usize> = match entry_checks {
                None => (0..n).collect(),
                Some(k) => (0..k).map(|_| rng.random_range(0..n)).collect(),
            };
            for idx in picks {
                let mut p = w.clone();
                p.layers[li].weight[idx] += h;
                let mut m = w.clone();
                m.layers[li].weight[idx] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                let an = g.weights.layers[li].weight[idx];
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "layer {li} w{idx}: {fd} vs {an}");
            }
            for idx in 0..w.layers[li].bias.len().min(entry_checks.unwrap_or(usize::MAX)) {
                let mut p = w.clone();
                p.layers[li].bias[idx] += h;
                let mut m = w.clone();
                m.layers[li].bias[idx] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                let an = g.weights.layers[li].bias[idx];
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "layer {li} b{idx}: {fd} vs {an}");
            }
        }
        for idx in 0..x.len().min(entry_checks.unwrap_or(usize::MAX)) {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (mlp_forward(&w, &xp).unwrap().dot(&c) - mlp_forward(&w, &xm).unwrap().dot(&c))
                / (2.0 * h);
            assert!((fd - g.input[idx]).abs() <= 1e-6 * g.input[idx].abs().max(1.0));
        }
    }

    #[test]
    fn gradients_small_network() {
        check_gradients(vec![4, 8, 4], 3, 4, None);
    }

    #[test]
    fn gradients_preset_shapes() {
        check_gradients(vec![35, 50, 150, 35], 2, 5, Some(20));
        check_gradients(vec![30, 128, 128, 30], 2, 6, Some(20));
        check_gradients(vec![35, 100, 220, 150, 35], 2, 7, Some(20));
        check_gradients(vec![30, 100, 300, 160, 30], 2, 8, Some(20));
        check_gradients(vec![1600, 512, 512, 1600], 1, 9, Some(5));
    }

    #[test]
    fn lipschitz_bound_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let spec = MlpSpec::new(vec![6, 12, 9, 6]).unwrap();
        let mut w = glorot_uniform_init(&spec, &mut rng);
        randomize(&mut w, &mut rng);
        let norms: f64 = w.layers.iter().map(|l| l.weight.clone().svd(false, false).singular_values.max()).product();
        let bound = norms * GELU_LIPSCHITZ.powi(2);
        for _ in 0..200 {
            let x = random(6, 1, &mut rng) * 3.0;
            let y = random(6, 1, &mut rng) * 3.0;
            let d = (mlp_forward(&w, &x).unwrap() - mlp_forward(&w, &y).unwrap()).norm();
            assert!(d <= bound * (&x - &y).norm());
        }
    }
}
