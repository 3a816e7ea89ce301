//! Finite-difference assembly of the elliptic operator
//! `A u = -Σ a_ij ∂_i ∂_j u + Σ b_i ∂_i u + q u` over the interior unknowns of
//! a masked grid. Dirichlet neighbours are eliminated (their value is zero).

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::coefficients::{diffusion_matrix, drift_vector, MarketPoint};
use crate::domain_grid::Grid;
use crate::linalg::{self, CsrMatrix};
use crate::{Error, Result};

/// Largest unknown count for which the monotonicity shift is computed from a
/// dense eigendecomposition.
pub const DENSE_SHIFT_LIMIT: usize = 1200;

/// Lanczos steps for the large-operator eigenvalue estimate.
pub const LANCZOS_STEPS: usize = 300;

/// Power-iteration steps used by the norm estimators.
pub const POWER_STEPS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorCoefficients {
    a: DMatrix<f64>,
    b: Vec<f64>,
    q: f64,
}

impl OperatorCoefficients {
    /// Validates symmetry and positive definiteness of `a`.
    pub fn new(a: DMatrix<f64>, b: Vec<f64>, q: f64) -> Result<Self> {
        let n = b.len();
        if a.nrows() != n || a.ncols() != n {
            return Err(Error::Shape { what: "diffusion matrix", expected: n, got: a.nrows() });
        }
        if a.iter().chain(&b).any(|v| !v.is_finite()) || !q.is_finite() {
            return Err(Error::InvalidOperator("non-finite operator coefficient".into()));
        }
        let scale = a.amax().max(f64::MIN_POSITIVE);
        for i in 0..n {
            for j in 0..i {
                if (a[(i, j)] - a[(j, i)]).abs() > 1e-14 * scale {
                    return Err(Error::InvalidOperator(format!(
                        "diffusion matrix not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let lam = SymmetricEigen::new(a.clone()).eigenvalues.min();
        if !(lam > 0.0) {
            return Err(Error::InvalidOperator(format!(
                "diffusion matrix not positive definite (smallest eigenvalue {lam:e})"
            )));
        }
        Ok(Self { a, b, q })
    }

    pub fn from_market(p: &MarketPoint) -> Result<Self> {
        Self::new(
            diffusion_matrix(&p.sigma, &p.sigma_sq, &p.rho),
            drift_vector(&p.sigma_sq, p.r, p.m),
            p.r + p.d,
        )
    }

    pub fn n(&self) -> usize {
        self.b.len()
    }
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &[f64] {
        &self.b
    }
    pub fn q(&self) -> f64 {
        self.q
    }

    /// Largest cell Péclet number `|b_i| h_i / (2 a_ii)` on `grid`.
    pub fn cell_peclet(&self, grid: &Grid) -> f64 {
        (0..self.n())
            .map(|i| self.b[i].abs() * grid.spacing()[i] / (2.0 * self.a[(i, i)]))
            .fold(0.0, f64::max)
    }
}

/// Sparse operator over the interior unknowns of a grid.
#[derive(Debug, Clone)]
pub struct DiscreteOperator {
    matrix: CsrMatrix,
    grid: Arc<Grid>,
}

pub fn assemble(coeffs: &OperatorCoefficients, grid: &Arc<Grid>) -> Result<DiscreteOperator> {
    let n = grid.n();
    if coeffs.n() != n {
        return Err(Error::Shape { what: "operator coefficients", expected: n, got: coeffs.n() });
    }
    let h = grid.spacing();
    let strides = grid.strides();
    let a = &coeffs.a;

    let mut diag = coeffs.q;
    for i in 0..n {
        diag += 2.0 * a[(i, i)] / (h[i] * h[i]);
    }
    // (offset in flat index, weight) for every off-diagonal stencil entry
    let mut stencil: Vec<(isize, f64)> = Vec::with_capacity(3usize.pow(n as u32));
    for i in 0..n {
        let s = strides[i] as isize;
        let second = -a[(i, i)] / (h[i] * h[i]);
        let first = coeffs.b[i] / (2.0 * h[i]);
        stencil.push((s, second + first));
        stencil.push((-s, second - first));
        for j in (i + 1)..n {
            let t = strides[j] as isize;
            let w = a[(i, j)] / (2.0 * h[i] * h[j]);
            stencil.push((s + t, -w));
            stencil.push((-s - t, -w));
            stencil.push((s - t, w));
            stencil.push((-s + t, w));
        }
    }

    let rows = grid
        .interior_nodes()
        .iter()
        .enumerate()
        .map(|(k, &flat)| {
            let mut row = Vec::with_capacity(stencil.len() + 1);
            row.push((k, diag));
            for &(off, w) in &stencil {
                // interior nodes are never on a face, so the neighbour exists
                let nb = (flat as isize + off) as usize;
                if let Some(col) = grid.interior_index(nb) {
                    if w != 0.0 {
                        row.push((col, w));
                    }
                }
            }
            row
        })
        .collect();
    Ok(DiscreteOperator {
        matrix: CsrMatrix::from_rows(grid.interior_count(), rows),
        grid: Arc::clone(grid),
    })
}

impl DiscreteOperator {
    /// Wrap an arbitrary matrix over the interior unknowns of `grid`.
    pub fn from_matrix(matrix: CsrMatrix, grid: &Arc<Grid>) -> Result<Self> {
        let m = grid.interior_count();
        if matrix.nrows() != m || matrix.ncols() != m {
            return Err(Error::Shape { what: "operator matrix", expected: m, got: matrix.nrows() });
        }
        Ok(Self { matrix, grid: Arc::clone(grid) })
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }
    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn apply(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_len(u.len())?;
        Ok(self.matrix.mul(u))
    }

    fn check_len(&self, got: usize) -> Result<()> {
        if got != self.dim() {
            return Err(Error::Shape { what: "interior vector", expected: self.dim(), got });
        }
        Ok(())
    }

    /// Symmetric part `(A + Aᵀ) / 2` as a dense matrix.
    pub fn symmetric_part_dense(&self) -> DMatrix<f64> {
        let d = self.matrix.to_dense();
        (&d + d.transpose()) * 0.5
    }

    /// Smallest eigenvalue of the symmetric part.
    pub fn symmetric_min_eigenvalue(&self) -> f64 {
        let m = self.dim();
        if m <= DENSE_SHIFT_LIMIT {
            return SymmetricEigen::new(self.symmetric_part_dense()).eigenvalues.min();
        }
        let (lo, _) = linalg::lanczos_extremes(m, LANCZOS_STEPS, 0x5eed, |v| {
            let av = self.matrix.mul(v);
            let atv = self.matrix.transpose_mul(v);
            av.iter().zip(&atv).map(|(x, y)| 0.5 * (x + y)).collect()
        });
        lo
    }

    /// `c1 = max(0, -λ_min(sym A))`, so that `<Au, u> + c1 |u|² >= 0`.
    pub fn monotonicity_shift(&self) -> f64 {
        (-self.symmetric_min_eigenvalue()).max(0.0)
    }
}

/// Free-function form of [`DiscreteOperator::apply`].
pub fn apply(op: &DiscreteOperator, u: &[f64]) -> Result<Vec<f64>> {
    op.apply(u)
}

/// Spectral-norm estimate of `A1 A2 - A2 A1` by power iteration on `CᵀC`.
pub fn commutator_norm(op1: &DiscreteOperator, op2: &DiscreteOperator) -> Result<f64> {
    if op1.dim() != op2.dim() || op1.grid.dims() != op2.grid.dims() {
        return Err(Error::Shape { what: "commutator operands", expected: op1.dim(), got: op2.dim() });
    }
    let (a, b) = (&op1.matrix, &op2.matrix);
    let c = |v: &[f64]| -> Vec<f64> {
        let ab = a.mul(&b.mul(v));
        let ba = b.mul(&a.mul(v));
        ab.iter().zip(&ba).map(|(x, y)| x - y).collect()
    };
    let ct = |v: &[f64]| -> Vec<f64> {
        // (AB - BA)ᵀ = BᵀAᵀ - AᵀBᵀ
        let x = b.transpose_mul(&a.transpose_mul(v));
        let y = a.transpose_mul(&b.transpose_mul(v));
        x.iter().zip(&y).map(|(p, q)| p - q).collect()
    };
    let lam = linalg::power_iteration(op1.dim(), POWER_STEPS, 0xc0c0, |v| ct(&c(v)));
    Ok(lam.max(0.0).sqrt())
}

/// Sparse table dump: row, column, value.
pub fn write_operator_csv<W: std::io::Write>(op: &DiscreteOperator, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["row", "col", "value"])?;
    for i in 0..op.dim() {
        for (j, v) in op.matrix.row(i) {
            w.write_record(&[i.to_string(), j.to_string(), format!("{v:.17e}")])?;
        }
    }
    w.flush()?;
    Ok(())
}
