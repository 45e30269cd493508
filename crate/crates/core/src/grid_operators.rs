//! Finite-difference Laplacians on uniform grids of the unit interval / torus and the
//! shifted linear solves `(I - cA)x = b` used by the linearly implicit time steps.
//!
//! States are stored as columns of a `DMatrix<f64>`; a batch of `B` states on a grid
//! with `d` unknowns is a `d x B` matrix. Two-dimensional grids use row-major
//! ordering: unknown `(i, j)` lives at index `i * N + j`.

use std::borrow::Cow;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Dirichlet,
    Periodic,
}

/// Uniform grid on `[0,1]` or `[0,1]^2`.
///
/// Dirichlet grids hold the interior nodes `i/(N+1)`, `i = 1..=N`; periodic grids hold
/// `i/N`, `i = 0..N`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dimension: usize,
    pub points_per_axis: usize,
    pub boundary: Boundary,
    pub diffusion_scale: f64,
}

impl GridSpec {
    pub fn new(
        dimension: usize,
        points_per_axis: usize,
        boundary: Boundary,
        diffusion_scale: f64,
    ) -> Result<Self> {
        if !(dimension == 1 || dimension == 2) {
            return Err(invalid(format!("grid dimension must be 1 or 2, got {dimension}")));
        }
        if points_per_axis == 0 {
            return Err(invalid("grid needs at least one point per axis"));
        }
        if !(diffusion_scale >= 0.0 && diffusion_scale.is_finite()) {
            return Err(invalid(format!("diffusion scale must be finite and >= 0, got {diffusion_scale}")));
        }
        Ok(Self {
            dimension,
            points_per_axis,
            boundary,
            diffusion_scale,
        })
    }

    pub fn unknowns(&self) -> usize {
        self.points_per_axis.pow(self.dimension as u32)
    }

    /// Coordinates of the nodes along one axis.
    pub fn axis_nodes(&self) -> Vec<f64> {
        let n = self.points_per_axis;
        match self.boundary {
            Boundary::Dirichlet => (1..=n).map(|i| i as f64 / (n + 1) as f64).collect(),
            Boundary::Periodic => (0..n).map(|i| i as f64 / n as f64).collect(),
        }
    }

    /// Coordinates of every unknown, in storage order. 1D grids report `y = 0`.
    pub fn points(&self) -> Vec<[f64; 2]> {
        let axis = self.axis_nodes();
        match self.dimension {
            1 => axis.iter().map(|&x| [x, 0.0]).collect(),
            _ => axis
                .iter()
                .flat_map(|&x| axis.iter().map(move |&y| [x, y]))
                .collect(),
        }
    }

    /// The `diffusion_scale`-weighted discrete Laplacian on this grid.
    pub fn laplacian(&self) -> Result<LinearOperator> {
        let (n, nu) = (self.points_per_axis, self.diffusion_scale);
        match (self.dimension, self.boundary) {
            (1, Boundary::Dirichlet) => build_dirichlet_laplacian_1d(n, nu),
            (1, Boundary::Periodic) => build_periodic_laplacian_1d(n, nu),
            (_, Boundary::Periodic) => build_periodic_laplacian_2d(n, nu),
            (_, Boundary::Dirichlet) => {
                let axis = build_dirichlet_laplacian_1d(n, nu)?;
                Ok(LinearOperator::kronecker_sum(axis.to_dense().into_owned()))
            }
        }
    }
}

/// Row-compressed copy of a mostly-zero dense operator, used only to speed up `apply`.
#[derive(Clone, Debug)]
struct SparseRows {
    offsets: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseRows {
    fn from_dense(m: &DMatrix<f64>) -> Option<Self> {
        let nnz = m.iter().filter(|v| **v != 0.0).count();
        if nnz * 8 > m.len() {
            return None;
        }
        let mut offsets = Vec::with_capacity(m.nrows() + 1);
        let mut cols = Vec::with_capacity(nnz);
        let mut vals = Vec::with_capacity(nnz);
        offsets.push(0);
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                let v = m[(i, j)];
                if v != 0.0 {
                    cols.push(j);
                    vals.push(v);
                }
            }
            offsets.push(cols.len());
        }
        Some(Self { offsets, cols, vals })
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let rows = self.offsets.len() - 1;
        let mut out = DMatrix::zeros(rows, x.ncols());
        for (src, mut dst) in x.column_iter().zip(out.column_iter_mut()) {
            for i in 0..rows {
                let mut acc = 0.0;
                for k in self.offsets[i]..self.offsets[i + 1] {
                    acc += self.vals[k] * src[self.cols[k]];
                }
                dst[i] = acc;
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
enum Repr {
    Dense {
        matrix: DMatrix<f64>,
        sparse: Option<SparseRows>,
    },
    /// `axis ⊗ I + I ⊗ axis` on an `n x n` grid, never materialized unless asked.
    KroneckerSum { axis: DMatrix<f64> },
}

/// Square matrix representing a discretized spatial operator.
#[derive(Clone, Debug)]
pub struct LinearOperator {
    repr: Repr,
}

impl LinearOperator {
    pub fn from_dense(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(invalid(format!(
                "operator must be square and nonempty, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let sparse = SparseRows::from_dense(&matrix);
        Ok(Self {
            repr: Repr::Dense { matrix, sparse },
        })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            repr: Repr::Dense {
                matrix: DMatrix::zeros(dim, dim),
                sparse: None,
            },
        }
    }

    fn kronecker_sum(axis: DMatrix<f64>) -> Self {
        Self {
            repr: Repr::KroneckerSum { axis },
        }
    }

    pub fn dim(&self) -> usize {
        match &self.repr {
            Repr::Dense { matrix, .. } => matrix.nrows(),
            Repr::KroneckerSum { axis } => axis.nrows() * axis.nrows(),
        }
    }

    /// Dense form. Kronecker-sum operators are expanded on demand.
    pub fn to_dense(&self) -> Cow<'_, DMatrix<f64>> {
        match &self.repr {
            Repr::Dense { matrix, .. } => Cow::Borrowed(matrix),
            Repr::KroneckerSum { axis } => {
                let id = DMatrix::<f64>::identity(axis.nrows(), axis.nrows());
                Cow::Owned(axis.kronecker(&id) + id.kronecker(axis))
            }
        }
    }

    /// `A X` for a batch of column states.
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("operator apply", self.dim(), x.nrows())?;
        Ok(match &self.repr {
            Repr::Dense {
                sparse: Some(rows), ..
            } => rows.apply(x),
            Repr::Dense { matrix, .. } => matrix * x,
            Repr::KroneckerSum { axis } => {
                let n = axis.nrows();
                let axis_t = axis.transpose();
                let mut out = DMatrix::zeros(x.nrows(), x.ncols());
                for (src, mut dst) in x.column_iter().zip(out.column_iter_mut()) {
                    // Column-major reshape of a row-major state is the transposed grid
                    // array Y = X^T, for which (A⊗I + I⊗A) acts as Y A^T + A Y.
                    let y = DMatrix::from_column_slice(n, n, src.as_slice());
                    let r = &y * &axis_t + axis * &y;
                    dst.copy_from_slice(r.as_slice());
                }
                out
            }
        })
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let check = |m: &DMatrix<f64>| (m - m.transpose()).amax() <= tol;
        match &self.repr {
            Repr::Dense { matrix, .. } => check(matrix),
            Repr::KroneckerSum { axis } => check(axis),
        }
    }
}

fn check_scale(nu: f64) -> Result<()> {
    if nu >= 0.0 && nu.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("diffusion scale must be finite and >= 0, got {nu}")))
    }
}

/// `ν (N+1)^2 tridiag(1, -2, 1)` on the interior nodes `i/(N+1)`.
pub fn build_dirichlet_laplacian_1d(n: usize, nu: f64) -> Result<LinearOperator> {
    if n == 0 {
        return Err(invalid("Dirichlet Laplacian needs N >= 1"));
    }
    check_scale(nu)?;
    let s = nu * ((n + 1) * (n + 1)) as f64;
    let m = DMatrix::from_fn(n, n, |i, j| match i.abs_diff(j) {
        0 => -2.0 * s,
        1 => s,
        _ => 0.0,
    });
    LinearOperator::from_dense(m)
}

fn periodic_matrix(n: usize, nu: f64) -> DMatrix<f64> {
    let s = nu * (n * n) as f64;
    DMatrix::from_fn(n, n, |i, j| {
        let d = i.abs_diff(j);
        if d == 0 {
            -2.0 * s
        } else if d == 1 || d == n - 1 {
            s
        } else {
            0.0
        }
    })
}

/// `ν N^2` times the wrap-around second-difference stencil on the nodes `i/N`.
pub fn build_periodic_laplacian_1d(n: usize, nu: f64) -> Result<LinearOperator> {
    if n < 3 {
        return Err(invalid(format!("periodic Laplacian needs N >= 3, got {n}")));
    }
    check_scale(nu)?;
    LinearOperator::from_dense(periodic_matrix(n, nu))
}

/// Kronecker sum `A1 ⊗ I + I ⊗ A1` of the 1D periodic operator on an `N x N` torus grid.
pub fn build_periodic_laplacian_2d(n: usize, nu: f64) -> Result<LinearOperator> {
    if n < 3 {
        return Err(invalid(format!("periodic Laplacian needs N >= 3, got {n}")));
    }
    check_scale(nu)?;
    Ok(LinearOperator::kronecker_sum(periodic_matrix(n, nu)))
}

#[derive(Clone, Debug)]
enum SolverRepr {
    Identity,
    Dense {
        inverse: DMatrix<f64>,
    },
    /// Eigenbasis of the axis operator; `scale[(a, b)] = 1 / (1 - c (λ_a + λ_b))`.
    Spectral {
        basis: DMatrix<f64>,
        basis_t: DMatrix<f64>,
        scale: DMatrix<f64>,
    },
}

/// Precomputed solver for `(I - cA) x = b`, reusable across many right-hand sides.
#[derive(Clone, Debug)]
pub struct ShiftedSolver {
    shift: f64,
    dim: usize,
    repr: SolverRepr,
}

// Pivot ratio below which the factorization is reported as numerically singular.
const PIVOT_RATIO_FLOOR: f64 = 1e-13;

/// Factorizes `I - cA` for repeated solves.
pub fn make_shifted_solver(a: &LinearOperator, c: f64) -> Result<ShiftedSolver> {
    if !(c >= 0.0 && c.is_finite()) {
        return Err(invalid(format!("shift must be finite and >= 0, got {c}")));
    }
    let dim = a.dim();
    if c == 0.0 {
        return Ok(ShiftedSolver {
            shift: c,
            dim,
            repr: SolverRepr::Identity,
        });
    }
    let repr = match &a.repr {
        Repr::KroneckerSum { axis } if a.is_symmetric(1e-12 * axis.amax().max(1.0)) => {
            let eig = SymmetricEigen::new(axis.clone());
            let n = axis.nrows();
            let lam = &eig.eigenvalues;
            let mut scale = DMatrix::zeros(n, n);
            let mut largest = 0.0f64;
            let mut smallest = f64::INFINITY;
            for i in 0..n {
                for j in 0..n {
                    let den = 1.0 - c * (lam[i] + lam[j]);
                    largest = largest.max(den.abs());
                    smallest = smallest.min(den.abs());
                    scale[(i, j)] = 1.0 / den;
                }
            }
            if !(smallest > PIVOT_RATIO_FLOOR * largest) {
                return Err(Error::Singular { shift: c });
            }
            let basis = eig.eigenvectors;
            SolverRepr::Spectral {
                basis_t: basis.transpose(),
                basis,
                scale,
            }
        }
        _ => {
            let dense = a.to_dense();
            let m = DMatrix::<f64>::identity(dim, dim) - dense.as_ref() * c;
            let lu = m.lu();
            let diag = lu.u().diagonal().map(f64::abs);
            let (lo, hi) = (diag.min(), diag.max());
            if !(lo > PIVOT_RATIO_FLOOR * hi) {
                return Err(Error::Singular { shift: c });
            }
            let inverse = lu.try_inverse().ok_or(Error::Singular { shift: c })?;
            SolverRepr::Dense { inverse }
        }
    };
    Ok(ShiftedSolver {
        shift: c,
        dim,
        repr,
    })
}

impl ShiftedSolver {
    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Solves `(I - cA) X = B` column by column.
    pub fn solve(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("shifted solve", self.dim, b.nrows())?;
        Ok(match &self.repr {
            SolverRepr::Identity => b.clone(),
            SolverRepr::Dense { inverse } => inverse * b,
            SolverRepr::Spectral {
                basis,
                basis_t,
                scale,
            } => {
                let n = basis.nrows();
                let mut out = DMatrix::zeros(b.nrows(), b.ncols());
                for (src, mut dst) in b.column_iter().zip(out.column_iter_mut()) {
                    let y = DMatrix::from_column_slice(n, n, src.as_slice());
                    let hat = (basis_t * y * basis).component_mul(scale);
                    let x = basis * hat * basis_t;
                    dst.copy_from_slice(x.as_slice());
                }
                out
            }
        })
    }

    /// `(I - cA)^{-1}` as a dense matrix.
    pub fn inverse_dense(&self) -> DMatrix<f64> {
        match &self.repr {
            SolverRepr::Dense { inverse } => inverse.clone(),
            _ => self
                .solve(&DMatrix::identity(self.dim, self.dim))
                .expect("identity has matching dimension"),
        }
    }
}
