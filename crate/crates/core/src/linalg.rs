//! Small sparse/dense linear-algebra kernels shared by the solvers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Build from per-row `(column, value)` lists. Duplicate columns in a row
    /// are summed; columns are stored sorted.
    pub fn from_rows(ncols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let nrows = rows.len();
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            let mut last: Option<usize> = None;
            for (c, v) in row {
                debug_assert!(c < ncols);
                if last == Some(c) {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(c);
                    values.push(v);
                    last = Some(c);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_rows(n, (0..n).map(|i| vec![(i, 1.0)]).collect())
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.col_idx[a..b].iter().copied().zip(self.values[a..b].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|e| e.0 == j).map_or(0.0, |e| e.1)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows).map(|i| self.get(i, i)).collect()
    }

    /// `y = A x`.
    pub fn mul_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
            let mut s = 0.0;
            for k in a..b {
                s += self.values[k] * x[self.col_idx[k]];
            }
            *yi = s;
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.mul_into(x, &mut y);
        y
    }

    /// `y = A^T x`.
    pub fn transpose_mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.ncols];
        for (i, &xi) in x.iter().enumerate() {
            for (j, v) in self.row(i) {
                y[j] += v * xi;
            }
        }
        y
    }

    /// `alpha * I + beta * self` (square matrices only).
    pub fn shifted(&self, alpha: f64, beta: f64) -> Self {
        let rows = (0..self.nrows)
            .map(|i| {
                let mut row: Vec<(usize, f64)> = self.row(i).map(|(j, v)| (j, beta * v)).collect();
                row.push((i, alpha));
                row
            })
            .collect();
        Self::from_rows(self.ncols, rows)
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                m[(i, j)] += v;
            }
        }
        m
    }

    /// Maximum half-bandwidth `max |i - j|` over stored entries.
    pub fn bandwidth(&self) -> usize {
        (0..self.nrows)
            .flat_map(|i| self.row(i).map(move |(j, _)| i.abs_diff(j)))
            .max()
            .unwrap_or(0)
    }

    /// Gershgorin upper bound on the spectral radius.
    pub fn gershgorin_radius(&self) -> f64 {
        (0..self.nrows)
            .map(|i| self.row(i).map(|e| e.1.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Sum with a fixed binary-tree association, so the result never depends on
/// how the input was produced.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 64;
    if xs.len() <= LEAF {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Standard-normal vector from a fixed seed.
pub fn seeded_normal_vector(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// Solve a tridiagonal system by the Thomas algorithm. `lower[0]` and
/// `upper[n-1]` are ignored.
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut beta = diag[0];
    if beta == 0.0 {
        return Err(Error::SolverFailure { iterations: 0, residual: f64::INFINITY });
    }
    c[0] = if n > 1 { upper[0] / beta } else { 0.0 };
    d[0] = rhs[0] / beta;
    for i in 1..n {
        beta = diag[i] - lower[i] * c[i - 1];
        if beta == 0.0 {
            return Err(Error::SolverFailure { iterations: 0, residual: f64::INFINITY });
        }
        c[i] = if i + 1 < n { upper[i] / beta } else { 0.0 };
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Ok(d)
}

/// Outcome of an iterative solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Jacobi-preconditioned BiCGSTAB for `A x = b`, starting from `x`.
pub fn bicgstab(
    a: &CsrMatrix,
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> Result<SolveStats> {
    let n = b.len();
    let inv_diag: Vec<f64> = a
        .diagonal()
        .iter()
        .map(|&d| if d != 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveStats { iterations: 0, relative_residual: 0.0 });
    }
    let mut r = a.mul(x);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut res = norm2(&r) / bnorm;
    if res <= tol {
        return Ok(SolveStats { iterations: 0, relative_residual: res });
    }
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut t = vec![0.0; n];
    for it in 1..=max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 || omega == 0.0 {
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
            y[i] = p[i] * inv_diag[i];
        }
        a.mul_into(&y, &mut v);
        alpha = rho / dot(&r_hat, &v);
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if norm2(&s) / bnorm <= tol {
            for i in 0..n {
                x[i] += alpha * y[i];
            }
            a.mul_into(x, &mut t);
            let true_res = (0..n).map(|i| (b[i] - t[i]).powi(2)).sum::<f64>().sqrt() / bnorm;
            if true_res <= tol {
                return Ok(SolveStats { iterations: it, relative_residual: true_res });
            }
            for i in 0..n {
                r[i] = b[i] - t[i];
            }
            res = true_res;
            continue;
        }
        for i in 0..n {
            z[i] = s[i] * inv_diag[i];
        }
        a.mul_into(&z, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * y[i] + omega * z[i];
            r[i] = s[i] - omega * t[i];
        }
        res = norm2(&r) / bnorm;
        if res <= tol {
            // confirm against the true residual
            a.mul_into(x, &mut t);
            let true_res = (0..n).map(|i| (b[i] - t[i]).powi(2)).sum::<f64>().sqrt() / bnorm;
            if true_res <= tol {
                return Ok(SolveStats { iterations: it, relative_residual: true_res });
            }
            for i in 0..n {
                r[i] = b[i] - t[i];
            }
        }
    }
    Err(Error::SolverFailure { iterations: max_iter, residual: res })
}

/// Largest eigenvalue estimate of a symmetric positive semidefinite linear map
/// by `iterations` power steps from a seeded start vector.
pub fn power_iteration(
    dim: usize,
    iterations: usize,
    seed: u64,
    mut apply: impl FnMut(&[f64]) -> Vec<f64>,
) -> f64 {
    if dim == 0 {
        return 0.0;
    }
    let mut v = seeded_normal_vector(dim, seed);
    let n0 = norm2(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut estimate = 0.0;
    for _ in 0..iterations {
        let w = apply(&v);
        let nw = norm2(&w);
        estimate = dot(&v, &w);
        if nw == 0.0 {
            return 0.0;
        }
        v = w.into_iter().map(|x| x / nw).collect();
    }
    estimate
}

/// Extreme eigenvalues `(min, max)` of a symmetric linear map by Lanczos with
/// full reorthogonalisation.
pub fn lanczos_extremes(
    dim: usize,
    steps: usize,
    seed: u64,
    apply: impl Fn(&[f64]) -> Vec<f64>,
) -> (f64, f64) {
    if dim == 0 {
        return (0.0, 0.0);
    }
    let steps = steps.clamp(1, dim);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let mut alpha = Vec::with_capacity(steps);
    let mut beta: Vec<f64> = Vec::with_capacity(steps);
    let mut v = seeded_normal_vector(dim, seed);
    let nv = norm2(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    for _ in 0..steps {
        let mut w = apply(&v);
        let a = dot(&w, &v);
        alpha.push(a);
        basis.push(v);
        for _ in 0..2 {
            for q in &basis {
                let c = dot(&w, q);
                w.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
            }
        }
        let b = norm2(&w);
        if b <= 1e-12 * a.abs().max(1e-300) || basis.len() == steps {
            break;
        }
        beta.push(b);
        v = w.into_iter().map(|x| x / b).collect();
    }
    let k = alpha.len();
    let t = nalgebra::DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            alpha[i]
        } else if i + 1 == j {
            beta[i]
        } else if j + 1 == i {
            beta[j]
        } else {
            0.0
        }
    });
    let ev = nalgebra::SymmetricEigen::new(t).eigenvalues;
    (ev.min(), ev.max())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian(n: usize, shift: f64) -> CsrMatrix {
        CsrMatrix::from_rows(
            n,
            (0..n)
                .map(|i| {
                    let mut row = vec![(i, 2.0 + shift)];
                    if i > 0 {
                        row.push((i - 1, -1.0));
                    }
                    if i + 1 < n {
                        row.push((i + 1, -1.0));
                    }
                    row
                })
                .collect(),
        )
    }

    #[test]
    fn csr_basics() {
        let m = CsrMatrix::from_rows(3, vec![vec![(0, 1.0), (2, 2.0), (0, 1.0)], vec![], vec![(1, 3.0)]]);
        assert_eq!(m.get(0, 0), 2.0);
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.mul(&[1.0, 1.0, 1.0]), vec![4.0, 0.0, 3.0]);
        assert_eq!(m.transpose_mul(&[1.0, 1.0, 1.0]), vec![2.0, 3.0, 2.0]);
        assert_eq!(m.bandwidth(), 2);
        let s = m.shifted(1.0, 2.0);
        assert_eq!(s.get(1, 1), 1.0);
        assert_eq!(s.get(0, 0), 5.0);
    }

    #[test]
    fn thomas_matches_dense() {
        let n = 20;
        let a = laplacian(n, 0.5);
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let lower: Vec<f64> = (0..n).map(|i| if i > 0 { a.get(i, i - 1) } else { 0.0 }).collect();
        let upper: Vec<f64> = (0..n).map(|i| if i + 1 < n { a.get(i, i + 1) } else { 0.0 }).collect();
        let x = solve_tridiagonal(&lower, &a.diagonal(), &upper, &b).unwrap();
        let ax = a.mul(&x);
        assert!(ax.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-12));
    }

    #[test]
    fn bicgstab_converges_on_nonsymmetric_system() {
        let n = 200;
        let rows = (0..n)
            .map(|i| {
                let mut row = vec![(i, 3.0)];
                if i > 0 {
                    row.push((i - 1, -1.3));
                }
                if i + 1 < n {
                    row.push((i + 1, -0.7));
                }
                row
            })
            .collect();
        let a = CsrMatrix::from_rows(n, rows);
        let b = seeded_normal_vector(n, 3);
        let mut x = vec![0.0; n];
        let stats = bicgstab(&a, &b, &mut x, 1e-10, 500).unwrap();
        assert!(stats.relative_residual <= 1e-10);
        let r: Vec<f64> = a.mul(&x).iter().zip(&b).map(|(p, q)| p - q).collect();
        assert!(norm2(&r) / norm2(&b) <= 1e-10);
    }

    #[test]
    fn bicgstab_reports_failure() {
        let a = laplacian(400, 0.0);
        let b = seeded_normal_vector(400, 1);
        let mut x = vec![0.0; 400];
        assert!(matches!(
            bicgstab(&a, &b, &mut x, 1e-14, 3),
            Err(Error::SolverFailure { iterations: 3, .. })
        ));
    }

    #[test]
    fn power_iteration_finds_top_eigenvalue() {
        let n = 30;
        let a = laplacian(n, 0.0);
        let top = power_iteration(n, 2000, 7, |v| a.mul(v));
        let exact = 2.0 - 2.0 * (std::f64::consts::PI * n as f64 / (n as f64 + 1.0)).cos();
        assert!((top - exact).abs() < 1e-6, "{top} vs {exact}");
    }

    #[test]
    fn pairwise_sum_is_order_fixed() {
        let xs: Vec<f64> = (0..10_000).map(|i| 1.0 / (i as f64 + 1.0)).collect();
        assert_eq!(pairwise_sum(&xs), pairwise_sum(&xs.clone()));
        assert!((pairwise_sum(&xs) - xs.iter().sum::<f64>()).abs() < 1e-12);
    }
}
