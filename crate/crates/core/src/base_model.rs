//! The base model: `M` blocks of five trainable `d x d` matrices,
//!
//! ```text
//! V_m = W_{m,4} U_{m-1} + W_{m,5} f(U_{m-1})
//! U_m = W_{m,1} U_{m-1} + W_{m,2} f(U_{m-1}) + W_{m,3} f(V_m)
//! ```
//!
//! initialized so that it reproduces `M` steps of the second-order LIRK scheme.

use nalgebra::DMatrix;

use crate::error::{check_dim, invalid, Error, Result};
use crate::grid_operators::{make_shifted_solver, LinearOperator};
use crate::lirk::LirkParams;
use crate::pde_problems::Nonlinearity;

pub type Block = [DMatrix<f64>; 5];

#[derive(Clone, Debug, PartialEq)]
pub struct BaseWeights {
    blocks: Vec<Block>,
}

impl BaseWeights {
    pub fn new(blocks: Vec<Block>) -> Result<Self> {
        let d = match blocks.first() {
            Some(b) => b[0].nrows(),
            None => return Err(invalid("base model needs at least one block")),
        };
        for w in blocks.iter().flatten() {
            if w.nrows() != d || w.ncols() != d {
                return Err(invalid(format!(
                    "base model matrices must all be {d}x{d}, found {}x{}",
                    w.nrows(),
                    w.ncols()
                )));
            }
        }
        Ok(Self { blocks })
    }

    pub fn zeros(dim: usize, blocks: usize) -> Self {
        let z = DMatrix::zeros(dim, dim);
        Self {
            blocks: vec![[z.clone(), z.clone(), z.clone(), z.clone(), z]; blocks],
        }
    }

    pub fn dim(&self) -> usize {
        self.blocks[0][0].nrows()
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub fn param_count(&self) -> usize {
        5 * self.num_blocks() * self.dim() * self.dim()
    }
}

/// Weights whose untrained forward map is `M` steps of the scheme with parameters
/// `p` and step `H = T / M`.
pub fn from_lirk_params(
    p: LirkParams,
    a: &LinearOperator,
    terminal_time: f64,
    blocks: usize,
) -> Result<BaseWeights> {
    p.validate()?;
    if blocks == 0 {
        return Err(invalid("base model needs at least one block"));
    }
    if !(terminal_time > 0.0 && terminal_time.is_finite()) {
        return Err(invalid(format!("terminal time must be positive, got {terminal_time}")));
    }
    let h = terminal_time / blocks as f64;
    let d = a.dim();
    let s = make_shifted_solver(a, h * p.p2)?.inverse_dense();
    let a = a.to_dense();
    let a = a.as_ref();
    let id = DMatrix::<f64>::identity(d, d);
    let sa = &s * a;
    let c = h * h * (0.5 - p.p2);

    let w1 = &s * (&id + a * (h * (1.0 - p.p2))) + (&sa * &sa) * c;
    let w2 = &s * (h * p.b1()) + (&sa * &s) * c;
    let w3 = &s * (h * p.b2());
    let w4 = &s * (&id + a * (h * (p.p1 - p.p2)));
    let w5 = &s * (h * p.p1);
    let block = [w1, w2, w3, w4, w5];
    Ok(BaseWeights {
        blocks: vec![block; blocks],
    })
}

/// Intermediates of one block, for a batch of column states.
#[derive(Clone, Debug)]
pub struct BlockTape {
    pub input: DMatrix<f64>,
    pub f_input: DMatrix<f64>,
    pub inner: DMatrix<f64>,
    pub f_inner: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct ForwardTape {
    pub blocks: Vec<BlockTape>,
}

impl ForwardTape {
    /// Recomputes the model output from the recorded intermediates of the last block.
    pub fn replay(&self, w: &BaseWeights) -> Result<DMatrix<f64>> {
        check_dim("tape blocks", w.num_blocks(), self.blocks.len())?;
        let (t, b) = (self.blocks.last().expect("nonempty"), w.blocks.last().expect("nonempty"));
        Ok(block_output(b, &t.input, &t.f_input, &t.f_inner))
    }
}

#[inline]
fn block_output(
    b: &Block,
    u: &DMatrix<f64>,
    fu: &DMatrix<f64>,
    fv: &DMatrix<f64>,
) -> DMatrix<f64> {
    let mut out = &b[0] * u;
    out.gemm(1.0, &b[1], fu, 1.0);
    out.gemm(1.0, &b[2], fv, 1.0);
    out
}

#[inline]
fn block_inner(b: &Block, u: &DMatrix<f64>, fu: &DMatrix<f64>) -> DMatrix<f64> {
    let mut v = &b[3] * u;
    v.gemm(1.0, &b[4], fu, 1.0);
    v
}

pub fn forward(w: &BaseWeights, f: Nonlinearity, u0: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim("base model input", w.dim(), u0.nrows())?;
    let mut u = u0.clone();
    for b in &w.blocks {
        let fu = f.apply(&u);
        let fv = f.apply(&block_inner(b, &u, &fu));
        u = block_output(b, &u, &fu, &fv);
    }
    Ok(u)
}

pub fn forward_with_tape(
    w: &BaseWeights,
    f: Nonlinearity,
    u0: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, ForwardTape)> {
    check_dim("base model input", w.dim(), u0.nrows())?;
    let mut u = u0.clone();
    let mut blocks = Vec::with_capacity(w.num_blocks());
    for b in &w.blocks {
        let fu = f.apply(&u);
        let v = block_inner(b, &u, &fu);
        let fv = f.apply(&v);
        let next = block_output(b, &u, &fu, &fv);
        blocks.push(BlockTape {
            input: std::mem::replace(&mut u, next),
            f_input: fu,
            inner: v,
            f_inner: fv,
        });
    }
    Ok((u, ForwardTape { blocks }))
}

/// Gradient with respect to every weight matrix, and to the input batch.
#[derive(Clone, Debug)]
pub struct BaseGradient {
    pub weights: BaseWeights,
    pub input: DMatrix<f64>,
}

/// Reverse-mode pass: `cotangent` is `dL/dU_M` for the batch recorded in `tape`.
pub fn backward(
    w: &BaseWeights,
    f: Nonlinearity,
    tape: &ForwardTape,
    cotangent: &DMatrix<f64>,
) -> Result<BaseGradient> {
    if tape.blocks.len() != w.num_blocks() {
        return Err(Error::DimensionMismatch {
            context: "tape blocks",
            expected: w.num_blocks(),
            actual: tape.blocks.len(),
        });
    }
    let batch = tape.blocks[0].input.ncols();
    check_dim("cotangent rows", w.dim(), cotangent.nrows())?;
    check_dim("cotangent columns", batch, cotangent.ncols())?;

    let mut grads = Vec::with_capacity(w.num_blocks());
    let mut lam = cotangent.clone();
    for (b, t) in w.blocks.iter().zip(&tape.blocks).rev() {
        let lam_v = (b[2].tr_mul(&lam)).component_mul(&f.apply_derivative(&t.inner));
        let mut lam_fu = b[1].tr_mul(&lam);
        lam_fu.gemm_tr(1.0, &b[4], &lam_v, 1.0);
        let g = [
            &lam * t.input.transpose(),
            &lam * t.f_input.transpose(),
            &lam * t.f_inner.transpose(),
            &lam_v * t.input.transpose(),
            &lam_v * t.f_input.transpose(),
        ];
        let mut next = b[0].tr_mul(&lam);
        next.gemm_tr(1.0, &b[3], &lam_v, 1.0);
        next += lam_fu.component_mul(&f.apply_derivative(&t.input));
        lam = next;
        grads.push(g);
    }
    grads.reverse();
    Ok(BaseGradient {
        weights: BaseWeights { blocks: grads },
        input: lam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_operators::{build_dirichlet_laplacian_1d, build_periodic_laplacian_1d};
    use crate::lirk::{lirk_step2, rollout, OdeSystem};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng, scale: f64) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
    }

    fn random_weights(d: usize, m: usize, rng: &mut ChaCha8Rng) -> BaseWeights {
        BaseWeights::new(
            (0..m)
                .map(|_| std::array::from_fn(|_| random(d, d, rng, 0.5)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_operator_weights() {
        let a = LinearOperator::zeros(3);
        let p = LirkParams::new(0.4, 0.7).unwrap();
        let w = from_lirk_params(p, &a, 2.0, 4).unwrap();
        let h = 0.5;
        let id = DMatrix::<f64>::identity(3, 3);
        let b = &w.blocks()[0];
        let close = |m: &DMatrix<f64>, e: DMatrix<f64>| (m - e).amax() < 1e-15;
        assert!(close(&b[0], id.clone()));
        assert!(close(&b[1], &id * (h * (1.0 - 1.0 / (2.0 * p.p1)))));
        assert!(close(&b[2], &id * (h / (2.0 * p.p1))));
        assert!(close(&b[3], id.clone()));
        assert!(close(&b[4], &id * (h * p.p1)));
        assert_eq!(w.num_blocks(), 4);
        assert_eq!(w.param_count(), 5 * 4 * 9);
    }

    #[test]
    fn crank_nicolson_has_no_second_matrix() {
        let a = build_dirichlet_laplacian_1d(8, 0.01).unwrap();
        let w = from_lirk_params(LirkParams::CRANK_NICOLSON, &a, 1.0, 5).unwrap();
        assert!(w.blocks()[0][1].amax() == 0.0);
    }

    #[test]
    fn rejects_bad_parameters() {
        let a = LinearOperator::zeros(2);
        assert!(from_lirk_params(LirkParams { p1: 0.0, p2: 0.5 }, &a, 1.0, 2).is_err());
        assert!(from_lirk_params(LirkParams { p1: 0.5, p2: -0.5 }, &a, 1.0, 2).is_err());
        assert!(from_lirk_params(LirkParams::CRANK_NICOLSON, &a, 1.0, 0).is_err());
    }

    #[test]
    fn initialization_reproduces_scheme() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = build_periodic_laplacian_1d(30, 0.01).unwrap();
        let f = Nonlinearity::Sine;
        let sys = OdeSystem {
            linear: &a,
            nonlinearity: f,
        };
        let mut worst: f64 = 0.0;
        for p in crate::pde_problems::Preset::Sg1d.sweep_grid() {
            let u = random(30, 5, &mut rng, 3.0);
            let h = 2.0 / 15.0;
            let one = from_lirk_params(p, &a, h, 1).unwrap();
            let step = lirk_step2(p, &sys, h, &u).unwrap();
            assert!((forward(&one, f, &u).unwrap() - step).amax() <= 1e-12);
            let w = from_lirk_params(p, &a, 2.0, 15).unwrap();
            let r = rollout(p, &sys, 2.0, 15, &u).unwrap();
            worst = worst.max((forward(&w, f, &u).unwrap() - r).amax());
        }
        assert!(worst <= 1e-12, "{worst}");
    }

    #[test]
    fn explicit_midpoint_scalar_case() {
        let a = LinearOperator::zeros(1);
        let f = Nonlinearity::Affine {
            slope: 1.0,
            intercept: 0.0,
        };
        let w = from_lirk_params(LirkParams::CRANK_NICOLSON, &a, 1.0, 1).unwrap();
        let out = forward(&w, f, &DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert_eq!(out[0], 2.5);
    }

    #[test]
    fn linear_case_is_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random_weights(4, 3, &mut rng);
        let u = random(4, 2, &mut rng, 1.0);
        let b = w.blocks();
        let expect = &b[2][0] * &b[1][0] * &b[0][0] * &u;
        let got = forward(&w, Nonlinearity::Zero, &u).unwrap();
        assert!((got - expect).amax() < 1e-14);
    }

    #[test]
    fn tape_matches_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_weights(6, 3, &mut rng);
        let u = random(6, 4, &mut rng, 1.0);
        let f = Nonlinearity::ReactionDiffusion;
        let (out, tape) = forward_with_tape(&w, f, &u).unwrap();
        assert_eq!(out, forward(&w, f, &u).unwrap());
        assert_eq!(tape.blocks.len(), 3);
        assert_eq!(tape.replay(&w).unwrap(), out);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let w = BaseWeights::zeros(3, 1);
        assert!(forward(&w, Nonlinearity::Zero, &DMatrix::zeros(4, 1)).is_err());
        let mut blocks = w.blocks().to_vec();
        blocks[0][2] = DMatrix::zeros(2, 2);
        assert!(BaseWeights::new(blocks).is_err());
        assert!(BaseWeights::new(vec![]).is_err());
    }

    fn loss(w: &BaseWeights, f: Nonlinearity, u: &DMatrix<f64>, c: &DMatrix<f64>) -> f64 {
        forward(w, f, u).unwrap().dot(c)
    }

    fn perturbed(w: &BaseWeights, dir: &BaseWeights, t: f64) -> BaseWeights {
        let mut out = w.clone();
        for (a, b) in out.blocks.iter_mut().flatten().zip(dir.blocks.iter().flatten()) {
            *a += b * t;
        }
        out
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for f in [
            Nonlinearity::ReactionDiffusion,
            Nonlinearity::Sine,
            Nonlinearity::SqrtOnePlusSq,
        ] {
            let w = random_weights(4, 2, &mut rng);
            let u = random(4, 3, &mut rng, 1.0);
            let c = random(4, 3, &mut rng, 1.0);
            let (_, tape) = forward_with_tape(&w, f, &u).unwrap();
            let g = backward(&w, f, &tape, &c).unwrap();
            let h = 1e-5;
            for (bi, block) in w.blocks.iter().enumerate() {
                for (mi, m) in block.iter().enumerate() {
                    for idx in 0..m.len() {
                        let mut plus = w.clone();
                        plus.blocks[bi][mi][idx] += h;
                        let mut minus = w.clone();
                        minus.blocks[bi][mi][idx] -= h;
                        let fd = (loss(&plus, f, &u, &c) - loss(&minus, f, &u, &c)) / (2.0 * h);
                        let an = g.weights.blocks[bi][mi][idx];
                        assert!(
                            (fd - an).abs() <= 1e-6 * an.abs().max(1.0),
                            "{f:?} block {bi} matrix {mi} entry {idx}: {fd} vs {an}"
                        );
                    }
                }
            }
            for idx in 0..u.len() {
                let mut up = u.clone();
                up[idx] += h;
                let mut um = u.clone();
                um[idx] -= h;
                let fd = (loss(&w, f, &up, &c) - loss(&w, f, &um, &c)) / (2.0 * h);
                assert!((fd - g.input[idx]).abs() <= 1e-6 * g.input[idx].abs().max(1.0));
            }
        }
    }

    #[test]
    fn directional_derivatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = Nonlinearity::ReactionDiffusion;
        let w = random_weights(8, 3, &mut rng);
        let u = random(8, 5, &mut rng, 1.0);
        let c = random(8, 5, &mut rng, 1.0);
        let (_, tape) = forward_with_tape(&w, f, &u).unwrap();
        let g = backward(&w, f, &tape, &c).unwrap();
        for _ in 0..20 {
            let dir = random_weights(8, 3, &mut rng);
            let h = 1e-5;
            let fd = (loss(&perturbed(&w, &dir, h), f, &u, &c)
                - loss(&perturbed(&w, &dir, -h), f, &u, &c))
                / (2.0 * h);
            let an: f64 = g
                .weights
                .blocks
                .iter()
                .flatten()
                .zip(dir.blocks.iter().flatten())
                .map(|(a, b)| a.dot(b))
                .sum();
            assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-8), "{fd} vs {an}");
        }
    }

    #[test]
    fn nonlinear_paths_vanish_for_zero_f() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = random_weights(5, 2, &mut rng);
        let u = random(5, 2, &mut rng, 1.0);
        let c = random(5, 2, &mut rng, 1.0);
        let (_, tape) = forward_with_tape(&w, Nonlinearity::Zero, &u).unwrap();
        let g = backward(&w, Nonlinearity::Zero, &tape, &c).unwrap();
        for b in g.weights.blocks() {
            assert_eq!(b[1].amax(), 0.0);
            assert_eq!(b[2].amax(), 0.0);
            assert_eq!(b[4].amax(), 0.0);
        }
        let (_, tape) = forward_with_tape(&w, Nonlinearity::Sine, &u).unwrap();
        let g = backward(&w, Nonlinearity::Sine, &tape, &DMatrix::zeros(5, 2)).unwrap();
        assert!(g.weights.blocks().iter().flatten().all(|m| m.amax() == 0.0));
        assert_eq!(g.input.amax(), 0.0);
    }
}
