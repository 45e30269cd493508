//! Linearly implicit Runge–Kutta schemes for `u' = A u + f(u)`: the general stage
//! recursion, the two-parameter second-order family and its rollout.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Result};
use crate::grid_operators::{make_shifted_solver, LinearOperator, ShiftedSolver};
use crate::pde_problems::Nonlinearity;

/// Parameters `p = (p1, p2)` of the second-order family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LirkParams {
    pub p1: f64,
    pub p2: f64,
}

impl LirkParams {
    pub const CRANK_NICOLSON: LirkParams = LirkParams { p1: 0.5, p2: 0.5 };

    pub fn new(p1: f64, p2: f64) -> Result<Self> {
        let p = Self { p1, p2 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p1 > 0.0 && self.p2 > 0.0 && self.p1.is_finite() && self.p2.is_finite() {
            Ok(())
        } else {
            Err(invalid(format!(
                "LIRK parameters must be positive, got ({}, {})",
                self.p1, self.p2
            )))
        }
    }

    pub fn b1(&self) -> f64 {
        1.0 - 1.0 / (2.0 * self.p1)
    }

    pub fn b2(&self) -> f64 {
        1.0 / (2.0 * self.p1)
    }

    pub fn beta21(&self) -> f64 {
        2.0 * self.p1 * (0.5 - self.p2)
    }
}

/// General `s`-stage tableau. Only `alpha[i][j]` for `j < i` and `beta[i][j]` for
/// `j <= i` are read.
#[derive(Clone, Debug, PartialEq)]
pub struct ButcherTableau {
    pub stages: usize,
    pub alpha: DMatrix<f64>,
    pub beta: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl ButcherTableau {
    pub fn new(alpha: DMatrix<f64>, beta: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        let s = b.len();
        if s == 0 {
            return Err(invalid("tableau needs at least one stage"));
        }
        check_dim("tableau alpha rows", s, alpha.nrows())?;
        check_dim("tableau alpha cols", s, alpha.ncols())?;
        check_dim("tableau beta rows", s, beta.nrows())?;
        check_dim("tableau beta cols", s, beta.ncols())?;
        Ok(Self {
            stages: s,
            alpha,
            beta,
            b,
        })
    }

    /// `C_i = sum_{j<=i} beta_ij`
    pub fn implicit_row_sums(&self) -> DVector<f64> {
        DVector::from_fn(self.stages, |i, _| (0..=i).map(|j| self.beta[(i, j)]).sum())
    }

    /// `c_i = sum_{j<i} alpha_ij`
    pub fn explicit_row_sums(&self) -> DVector<f64> {
        DVector::from_fn(self.stages, |i, _| (0..i).map(|j| self.alpha[(i, j)]).sum())
    }
}

pub fn order2_tableau(p: LirkParams) -> Result<ButcherTableau> {
    p.validate()?;
    let alpha = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, p.p1, 0.0]);
    let beta = DMatrix::from_row_slice(2, 2, &[p.p2, 0.0, p.beta21(), p.p2]);
    let b = DVector::from_column_slice(&[p.b1(), p.b2()]);
    ButcherTableau::new(alpha, beta, b)
}

/// Residuals of the second-order conditions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrderResiduals {
    /// `sum b_i - 1`
    pub consistency: f64,
    /// `sum b_i C_i - 1/2`
    pub implicit: f64,
    /// `sum b_i c_i - 1/2`
    pub explicit: f64,
}

impl OrderResiduals {
    pub const TOLERANCE: f64 = 1e-12;

    pub fn satisfied(&self) -> bool {
        [self.consistency, self.implicit, self.explicit]
            .iter()
            .all(|r| r.abs() <= Self::TOLERANCE)
    }
}

pub fn check_order2_conditions(t: &ButcherTableau) -> (bool, OrderResiduals) {
    let r = OrderResiduals {
        consistency: t.b.sum() - 1.0,
        implicit: t.b.dot(&t.implicit_row_sums()) - 0.5,
        explicit: t.b.dot(&t.explicit_row_sums()) - 0.5,
    };
    (r.satisfied(), r)
}

/// Semi-discrete system `u' = A u + f(u)` with `A` already scaled by the diffusion.
#[derive(Clone, Copy, Debug)]
pub struct OdeSystem<'a> {
    pub linear: &'a LinearOperator,
    pub nonlinearity: Nonlinearity,
}

fn check_nonneg_step(h: f64) -> Result<()> {
    if h >= 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("step size must be finite and >= 0, got {h}")))
    }
}

/// One step of an arbitrary LIRK tableau on a batch of column states.
pub fn general_lirk_step(
    sys: &OdeSystem,
    t: &ButcherTableau,
    h: f64,
    u: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_nonneg_step(h)?;
    check_dim("LIRK state", sys.linear.dim(), u.nrows())?;
    if h == 0.0 {
        return Ok(u.clone());
    }
    let mut solvers: Vec<(f64, ShiftedSolver)> = Vec::new();
    let mut stages: Vec<DMatrix<f64>> = Vec::with_capacity(t.stages);
    for i in 0..t.stages {
        let mut implicit_arg = u.clone();
        let mut explicit_arg = u.clone();
        for (j, k) in stages.iter().enumerate() {
            implicit_arg += k * (h * t.beta[(i, j)]);
            explicit_arg += k * (h * t.alpha[(i, j)]);
        }
        let rhs = sys.linear.apply(&implicit_arg)? + sys.nonlinearity.apply(&explicit_arg);
        let shift = h * t.beta[(i, i)];
        let pos = match solvers.iter().position(|(c, _)| *c == shift) {
            Some(pos) => pos,
            None => {
                solvers.push((shift, make_shifted_solver(sys.linear, shift)?));
                solvers.len() - 1
            }
        };
        stages.push(solvers[pos].1.solve(&rhs)?);
    }
    let mut out = u.clone();
    for (k, bi) in stages.iter().zip(t.b.iter()) {
        out += k * (h * bi);
    }
    Ok(out)
}

/// Two-stage stepper of the second-order family with the factorization of
/// `I - h p2 A` cached for repeated steps.
#[derive(Clone, Debug)]
pub struct Lirk2 {
    params: LirkParams,
    h: f64,
    solver: ShiftedSolver,
}

impl Lirk2 {
    pub fn new(params: LirkParams, linear: &LinearOperator, h: f64) -> Result<Self> {
        params.validate()?;
        check_nonneg_step(h)?;
        Ok(Self {
            params,
            h,
            solver: make_shifted_solver(linear, h * params.p2)?,
        })
    }

    pub fn params(&self) -> LirkParams {
        self.params
    }

    pub fn step_size(&self) -> f64 {
        self.h
    }

    pub fn step(&self, sys: &OdeSystem, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("LIRK state", self.solver.dim(), u.nrows())?;
        if self.h == 0.0 {
            return Ok(u.clone());
        }
        let (p, h) = (self.params, self.h);
        let a = sys.linear;
        let f = sys.nonlinearity;
        let k1 = self.solver.solve(&(a.apply(u)? + f.apply(u)))?;
        let lin_arg = u + &k1 * (h * p.beta21());
        let nl_arg = u + &k1 * (h * p.p1);
        let k2 = self.solver.solve(&(a.apply(&lin_arg)? + f.apply(&nl_arg)))?;
        Ok(u + k1 * (h * p.b1()) + k2 * (h * p.b2()))
    }
}

pub fn lirk_step2(
    p: LirkParams,
    sys: &OdeSystem,
    h: f64,
    u: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    Lirk2::new(p, sys.linear, h)?.step(sys, u)
}

/// Crank–Nicolson explicit midpoint step in closed form:
/// `S((I + h/2 A) U + h f(S(U + h/2 f(U))))` with `S = (I - h/2 A)^{-1}`.
pub fn crank_nicolson_midpoint_step(
    sys: &OdeSystem,
    h: f64,
    u: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_nonneg_step(h)?;
    check_dim("LIRK state", sys.linear.dim(), u.nrows())?;
    if h == 0.0 {
        return Ok(u.clone());
    }
    let s = make_shifted_solver(sys.linear, h / 2.0)?;
    let f = sys.nonlinearity;
    let mid = s.solve(&(u + f.apply(u) * (h / 2.0)))?;
    let rhs = u + sys.linear.apply(u)? * (h / 2.0) + f.apply(&mid) * h;
    s.solve(&rhs)
}

/// `M`-fold composition of the second-order step with `h = T / M`.
pub fn rollout(
    p: LirkParams,
    sys: &OdeSystem,
    terminal_time: f64,
    steps: usize,
    u0: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if steps == 0 {
        return Err(invalid("rollout needs at least one step"));
    }
    if !(terminal_time > 0.0 && terminal_time.is_finite()) {
        return Err(invalid(format!("terminal time must be positive, got {terminal_time}")));
    }
    let stepper = Lirk2::new(p, sys.linear, terminal_time / steps as f64)?;
    let mut u = u0.clone();
    for _ in 0..steps {
        u = stepper.step(sys, &u)?;
    }
    Ok(u)
}
