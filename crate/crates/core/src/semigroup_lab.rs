//! Dense-matrix experiments on contraction semigroups: matrix exponentials,
//! the product identity for commuting generators, Yosida approximants and
//! piecewise composition.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::linalg::{power_iteration, seeded_normal_vector};
use crate::{Error, Result};

pub const DEFAULT_DIM: usize = 50;
pub const SPECTRUM_RANGE: (f64, f64) = (1e-2, 1e2);
const POWER_STEPS: usize = 100;
const NORM_SEED: u64 = 0x0ddba11;

/// Square matrix whose symmetric part is positive semidefinite.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneMatrix {
    matrix: DMatrix<f64>,
    min_sym_eigenvalue: f64,
}

impl MonotoneMatrix {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::InvalidOperator(format!(
                "matrix is {}x{}, not square",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let lam = min_sym_eigenvalue(&matrix);
        let scale = matrix.amax().max(1.0);
        if lam < -1e-12 * scale {
            return Err(Error::InvalidOperator(format!(
                "symmetric part has negative eigenvalue {lam:e}"
            )));
        }
        Ok(Self { matrix, min_sym_eigenvalue: lam })
    }

    /// `Q diag(λ) Qᵀ` with log-uniform `λ` in [`SPECTRUM_RANGE`].
    pub fn random_symmetric(k: usize, seed: u64) -> Self {
        let q = random_orthogonal(k, seed);
        let lam = log_uniform(k, seed ^ 0x9e37_79b9_7f4a_7c15);
        Self::new(symmetrize(&(&q * DMatrix::from_diagonal(&DVector::from_vec(lam)) * q.transpose())))
            .expect("constructed monotone")
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
    pub fn min_sym_eigenvalue(&self) -> f64 {
        self.min_sym_eigenvalue
    }
}

fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    let scale = m.amax();
    (m - m.transpose()).amax() <= 1e-14 * scale.max(f64::MIN_POSITIVE)
}

/// Orthogonal factor of the QR decomposition of a seeded Gaussian matrix.
pub fn random_orthogonal(k: usize, seed: u64) -> DMatrix<f64> {
    let g = DMatrix::from_vec(k, k, seeded_normal_vector(k * k, seed));
    g.qr().q()
}

fn log_uniform(k: usize, seed: u64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (SPECTRUM_RANGE.0.ln(), SPECTRUM_RANGE.1.ln());
    (0..k).map(|_| rng.random_range(lo..hi).exp()).collect()
}

/// Block of a block-diagonal generator in the shared basis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Block {
    /// 1x1 block `λ >= 0`.
    Scalar(f64),
    /// 2x2 block `[[damping, freq], [-freq, damping]]`, `damping >= 0`.
    Rotation { damping: f64, freq: f64 },
}

impl Block {
    fn size(&self) -> usize {
        match self {
            Block::Scalar(_) => 1,
            Block::Rotation { .. } => 2,
        }
    }
}

/// Two generators that are block diagonal in one orthogonal basis with
/// matching block shapes, hence commute.
#[derive(Debug, Clone)]
pub struct CommutingPair {
    q: DMatrix<f64>,
    blocks: Vec<(Block, Block)>,
    a1: DMatrix<f64>,
    a2: DMatrix<f64>,
}

impl CommutingPair {
    pub fn new(q: DMatrix<f64>, blocks: Vec<(Block, Block)>) -> Result<Self> {
        let k: usize = blocks.iter().map(|b| b.0.size()).sum();
        if !q.is_square() || q.nrows() != k {
            return Err(Error::Shape { what: "eigenbasis", expected: k, got: q.nrows() });
        }
        let orth = (&q.transpose() * &q - DMatrix::identity(k, k)).amax();
        if orth > 1e-12 {
            return Err(Error::InvalidOperator(format!("basis not orthogonal (defect {orth:e})")));
        }
        for (b1, b2) in &blocks {
            if b1.size() != b2.size() {
                return Err(Error::InvalidOperator("block shapes differ".into()));
            }
            for b in [b1, b2] {
                let ok = match *b {
                    Block::Scalar(l) => l >= 0.0 && l.is_finite(),
                    Block::Rotation { damping, freq } => damping >= 0.0 && freq.is_finite(),
                };
                if !ok {
                    return Err(Error::InvalidOperator(format!("block {b:?} is not monotone")));
                }
            }
        }
        let a1 = assemble_blocks(&q, blocks.iter().map(|b| b.0));
        let a2 = assemble_blocks(&q, blocks.iter().map(|b| b.1));
        Ok(Self { q, blocks, a1, a2 })
    }

    /// Symmetric pair with independent log-uniform spectra.
    pub fn random_symmetric(k: usize, seed: u64) -> Self {
        let q = random_orthogonal(k, seed);
        let l1 = log_uniform(k, seed.wrapping_add(1));
        let l2 = log_uniform(k, seed.wrapping_add(2));
        let blocks = l1.into_iter().zip(l2).map(|(a, b)| (Block::Scalar(a), Block::Scalar(b))).collect();
        Self::new(q, blocks).expect("constructed pair")
    }

    /// Weakly damped rotations with frequencies log-spaced over
    /// `[1, max_freq]`; the generator splits each frequency 60/40.
    pub fn rotational(blocks: usize, max_freq: f64, seed: u64) -> Self {
        let q = random_orthogonal(2 * blocks, seed);
        let bl = (0..blocks)
            .map(|i| {
                let w = max_freq.powf(i as f64 / (blocks - 1).max(1) as f64);
                (
                    Block::Rotation { damping: 0.01, freq: 0.6 * w },
                    Block::Rotation { damping: 0.01, freq: 0.4 * w },
                )
            })
            .collect();
        Self::new(q, bl).expect("constructed pair")
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.q
    }
    pub fn blocks(&self) -> &[(Block, Block)] {
        &self.blocks
    }
    pub fn a1(&self) -> &DMatrix<f64> {
        &self.a1
    }
    pub fn a2(&self) -> &DMatrix<f64> {
        &self.a2
    }

    /// `‖A1 A2 - A2 A1‖ / (‖A1‖ ‖A2‖)`.
    pub fn relative_commutator(&self) -> f64 {
        let c = &self.a1 * &self.a2 - &self.a2 * &self.a1;
        spectral_norm(&c) / (spectral_norm(&self.a1) * spectral_norm(&self.a2))
    }

    /// Vector with coordinate `weights[b]` on the first basis vector of each
    /// block.
    pub fn vector_in_basis(&self, weights: &[f64]) -> DVector<f64> {
        let mut coeffs = DVector::zeros(self.dim());
        let mut k = 0;
        for ((b, _), w) in self.blocks.iter().zip(weights) {
            coeffs[k] = *w;
            k += b.size();
        }
        &self.q * coeffs
    }

    /// Weight `1/freq` (scaled by 0.6) on each rotation block, so `‖A u0‖`
    /// stays bounded while every frequency is excited.
    pub fn rough_vector(&self) -> DVector<f64> {
        let weights: Vec<f64> = self
            .blocks
            .iter()
            .map(|(b, _)| match b {
                Block::Rotation { freq, .. } => 0.6 / freq,
                Block::Scalar(_) => 0.0,
            })
            .collect();
        self.vector_in_basis(&weights)
    }
}

/// `count` symmetric matrices sharing one eigenbasis, each with its own
/// log-uniform spectrum.
pub fn commuting_family(k: usize, count: usize, seed: u64) -> Vec<DMatrix<f64>> {
    let q = random_orthogonal(k, seed);
    (0..count as u64)
        .map(|i| {
            let d = DVector::from_vec(log_uniform(k, seed.wrapping_add(100 + i)));
            symmetrize(&(&q * DMatrix::from_diagonal(&d) * q.transpose()))
        })
        .collect()
}

fn assemble_blocks(q: &DMatrix<f64>, blocks: impl Iterator<Item = Block>) -> DMatrix<f64> {
    let k = q.nrows();
    let mut d = DMatrix::zeros(k, k);
    let mut i = 0;
    for b in blocks {
        match b {
            Block::Scalar(l) => d[(i, i)] = l,
            Block::Rotation { damping, freq } => {
                d[(i, i)] = damping;
                d[(i + 1, i + 1)] = damping;
                d[(i, i + 1)] = freq;
                d[(i + 1, i)] = -freq;
            }
        }
        i += b.size();
    }
    let m = q * d * q.transpose();
    if is_symmetric_blocks(&m) {
        symmetrize(&m)
    } else {
        m
    }
}

fn is_symmetric_blocks(m: &DMatrix<f64>) -> bool {
    (m - m.transpose()).amax() <= 1e-10 * m.amax().max(f64::MIN_POSITIVE)
}

/// Spectral norm by power iteration on `MᵀM` with a fixed seed.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    let mt = m.transpose();
    let lam = power_iteration(m.ncols(), POWER_STEPS, NORM_SEED, |v| {
        let v = DVector::from_column_slice(v);
        (&mt * (m * v)).as_slice().to_vec()
    });
    lam.max(0.0).sqrt()
}

/// `e^{-tA}` through the eigendecomposition of a symmetric matrix.
pub fn expm_eigen(a: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(a));
    let d = eig.eigenvalues.map(|l| (-t * l).exp());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371920351148152;

/// `e^{-tA}` by scaling and squaring with the degree-13 Padé approximant.
pub fn expm_pade(a: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    let k = a.nrows();
    let id = DMatrix::<f64>::identity(k, k);
    let mut m = a * (-t);
    let norm1 = (0..k).map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let s = if norm1 > THETA13 { (norm1 / THETA13).log2().ceil() as i32 } else { 0 };
    if s > 0 {
        m /= 2f64.powi(s);
    }
    let b = &PADE13;
    let m2 = &m * &m;
    let m4 = &m2 * &m2;
    let m6 = &m4 * &m2;
    let u_inner = &m6 * (&m6 * b[13] + &m4 * b[11] + &m2 * b[9]) + &m6 * b[7] + &m4 * b[5] + &m2 * b[3] + &id * b[1];
    let u = &m * u_inner;
    let v = &m6 * (&m6 * b[12] + &m4 * b[10] + &m2 * b[8]) + &m6 * b[6] + &m4 * b[4] + &m2 * b[2] + &id * b[0];
    let p = &v + &u;
    let q = &v - &u;
    let mut r = q.lu().solve(&p).expect("Padé denominator is invertible after scaling");
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

/// `e^{-tA}`: eigendecomposition for symmetric input, Padé otherwise.
pub fn expm(a: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    assert!(t >= 0.0, "expm needs t >= 0");
    if is_symmetric(a) {
        expm_eigen(a, t)
    } else {
        expm_pade(a, t)
    }
}

/// `‖e^{-A1-A2} - e^{-A1} e^{-A2}‖`.
pub fn exp_identity_residual(a1: &DMatrix<f64>, a2: &DMatrix<f64>) -> f64 {
    let lhs = expm(&(a1 + a2), 1.0);
    let rhs = expm(a1, 1.0) * expm(a2, 1.0);
    spectral_norm(&(lhs - rhs))
}

pub fn verify_exp_identity(pair: &CommutingPair) -> f64 {
    exp_identity_residual(pair.a1(), pair.a2())
}

/// The 2x2 pair `[[1,0],[0,0]]`, `[[.5,.5],[.5,.5]]` and its residual.
pub fn noncommuting_witness() -> (DMatrix<f64>, DMatrix<f64>, f64) {
    let a1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
    let a2 = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
    let r = exp_identity_residual(&a1, &a2);
    (a1, a2, r)
}

/// Resolvent `J = (I + λA)⁻¹` and Yosida approximant `A_λ = (I - J)/λ`,
/// the latter computed as the solution of `(I + λA) X = A`.
pub fn yosida(a: &DMatrix<f64>, lambda: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidOperator(format!("lambda must be positive, got {lambda}")));
    }
    let k = a.nrows();
    let id = DMatrix::<f64>::identity(k, k);
    let lu = (&id + a * lambda).lu();
    let singular = || Error::InvalidOperator(format!("I + {lambda} A is singular"));
    let j = lu.try_inverse().ok_or_else(singular)?;
    let a_lambda = lu.solve(a).ok_or_else(singular)?;
    if j.iter().chain(a_lambda.iter()).any(|v| !v.is_finite()) {
        return Err(singular());
    }
    Ok((j, a_lambda))
}

/// One (λ, μ) comparison of Yosida flows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct YosidaRow {
    pub lambda: f64,
    pub mu: f64,
    pub observed: f64,
    pub bound: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct YosidaTable {
    pub rows: Vec<YosidaRow>,
    pub max_ratio: f64,
}

/// `e^{-t(A1_λ + A2_λ)} u0`.
pub fn yosida_flow(pair: &CommutingPair, u0: &DVector<f64>, lambda: f64, t: f64) -> Result<DVector<f64>> {
    let (_, a1l) = yosida(pair.a1(), lambda)?;
    let (_, a2l) = yosida(pair.a2(), lambda)?;
    Ok(expm(&(a1l + a2l), t) * u0)
}

/// Check `‖u_λ(t) - u_μ(t)‖ <= 2 sqrt(2(λ+μ)t) sqrt(‖A1 u0‖² + ‖A2 u0‖²)`
/// over every pair drawn from `lambdas`.
pub fn yosida_flow_convergence(pair: &CommutingPair, u0: &DVector<f64>, lambdas: &[f64], t: f64) -> Result<YosidaTable> {
    if !(t > 0.0) {
        return Err(Error::InvalidInterval { t0: 0.0, t1: t });
    }
    let flows = lambdas
        .iter()
        .map(|&l| yosida_flow(pair, u0, l, t))
        .collect::<Result<Vec<_>>>()?;
    let g = ((pair.a1() * u0).norm_squared() + (pair.a2() * u0).norm_squared()).sqrt();
    let mut rows = Vec::new();
    for i in 0..lambdas.len() {
        for j in 0..lambdas.len() {
            let (lambda, mu) = (lambdas[i], lambdas[j]);
            let observed = (&flows[i] - &flows[j]).norm();
            let bound = 2.0 * (2.0 * (lambda + mu) * t).sqrt() * g;
            let ratio = if bound > 0.0 { observed / bound } else { 0.0 };
            rows.push(YosidaRow { lambda, mu, observed, bound, ratio });
        }
    }
    let max_ratio = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    Ok(YosidaTable { rows, max_ratio })
}

/// Least-squares slope of `log ‖u_λ - u_μ‖` against `log λ` at fixed `μ`.
pub fn yosida_rate_slope(
    pair: &CommutingPair,
    u0: &DVector<f64>,
    lambdas: &[f64],
    mu: f64,
    t: f64,
) -> Result<(f64, Vec<f64>)> {
    let reference = yosida_flow(pair, u0, mu, t)?;
    let diffs = lambdas
        .iter()
        .map(|&l| yosida_flow(pair, u0, l, t).map(|u| (u - &reference).norm()))
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = lambdas.iter().map(|l| l.ln()).collect();
    let ys: Vec<f64> = diffs.iter().map(|d| d.ln()).collect();
    Ok((least_squares_slope(&xs, &ys), diffs))
}

pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// `(Π e^{-Δt_i A_i}, e^{-Σ Δt_i A_i})`, the product applying the first
/// segment first.
pub fn compose_piecewise(ops: &[(DMatrix<f64>, f64)]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let k = ops.first().map_or(0, |o| o.0.nrows());
    let mut product = DMatrix::identity(k, k);
    let mut sum = DMatrix::zeros(k, k);
    for (a, dt) in ops {
        if !(*dt > 0.0) {
            return Err(Error::InvalidInterval { t0: 0.0, t1: *dt });
        }
        if a.nrows() != k || !a.is_square() {
            return Err(Error::Shape { what: "segment matrix", expected: k, got: a.nrows() });
        }
        product = expm(a, *dt) * product;
        sum += a * *dt;
    }
    Ok((product, expm(&sum, 1.0)))
}

/// Max over probes of `‖e^{-tA} v‖ / ‖v‖`.
pub fn contraction_ratio(a: &DMatrix<f64>, t: f64, probes: usize, seed: u64) -> f64 {
    let e = expm(a, t);
    probe_max(a.nrows(), probes, seed, |v| (&e * v).norm() / v.norm())
}

/// Max over probes of `‖A e^{-tA} v‖ / ‖A v‖`.
pub fn derivative_ratio(a: &DMatrix<f64>, t: f64, probes: usize, seed: u64) -> f64 {
    let e = expm(a, t);
    probe_max(a.nrows(), probes, seed, |v| (a * (&e * v)).norm() / (a * v).norm())
}

/// Max over probes of `‖A_λ v‖ / ‖A v‖`.
pub fn yosida_probe_ratio(a: &DMatrix<f64>, a_lambda: &DMatrix<f64>, probes: usize, seed: u64) -> f64 {
    probe_max(a.nrows(), probes, seed, |v| (a_lambda * v).norm() / (a * v).norm())
}

fn probe_max(k: usize, probes: usize, seed: u64, f: impl Fn(&DVector<f64>) -> f64) -> f64 {
    (0..probes as u64)
        .map(|p| f(&DVector::from_vec(seeded_normal_vector(k, seed.wrapping_add(p)))))
        .fold(0.0, f64::max)
}

/// CSV table of a Yosida sweep.
pub fn write_yosida_csv<W: std::io::Write>(table: &YosidaTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lambda", "mu", "observed", "bound", "ratio"])?;
    for r in &table.rows {
        w.write_record(&[r.lambda, r.mu, r.observed, r.bound, r.ratio].map(|v| format!("{v:.17e}")))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(v))
    }

    #[test]
    fn expm_examples() {
        let z = DMatrix::zeros(3, 3);
        assert_eq!(expm(&z, 1.0), DMatrix::identity(3, 3));
        assert!((expm_pade(&z, 1.0) - DMatrix::identity(3, 3)).amax() < 1e-15);
        let e = expm(&diag(&[1.0, 2.0]), 1.0);
        assert!((e[(0, 0)] - (-1f64).exp()).abs() < 1e-15);
        assert!((e[(1, 1)] - (-2f64).exp()).abs() < 1e-15);
        assert!(e[(0, 1)].abs() < 1e-15);
    }

    #[test]
    fn pade_matches_rotation_closed_form() {
        // e^{-t[[a,w],[-w,a]]} = e^{-ta} [[cos wt, -sin wt], [sin wt, cos wt]]
        let (a, w, t) = (0.3, 40.0, 1.7);
        let m = DMatrix::from_row_slice(2, 2, &[a, w, -w, a]);
        let e = expm(&m, t);
        let s = (-t * a).exp();
        let exact = DMatrix::from_row_slice(2, 2, &[
            s * (w * t).cos(), -s * (w * t).sin(),
            s * (w * t).sin(), s * (w * t).cos(),
        ]);
        assert!((e - exact).amax() < 1e-12);
    }

    #[test]
    fn eigen_and_pade_agree_on_symmetric_input() {
        for seed in 0..5 {
            let a = MonotoneMatrix::random_symmetric(DEFAULT_DIM, seed);
            let diff = (expm_eigen(a.matrix(), 1.0) - expm_pade(a.matrix(), 1.0)).amax();
            assert!(diff <= 1e-12, "seed {seed}: {diff:e}");
        }
    }

    #[test]
    fn exp_identity_examples() {
        assert!(exp_identity_residual(&diag(&[1.0, 2.0]), &diag(&[1.0, 2.0])) <= 1e-13);
        let pair = CommutingPair::random_symmetric(DEFAULT_DIM, 7);
        assert!(pair.relative_commutator() <= 1e-12);
        assert!(verify_exp_identity(&pair) <= 1e-10);
        let (_, _, r) = noncommuting_witness();
        // independent 2x2 evaluation: e^{-A1} is diagonal, A2 is a projector so
        // e^{-A2} = I - (1 - e^{-1}) A2, and [[1.5,.5],[.5,.5]] has eigenvalues 1 ± 1/√2
        let e1 = diag(&[(-1f64).exp(), 1.0]);
        let a2 = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        let e2 = DMatrix::identity(2, 2) - &a2 * (1.0 - (-1f64).exp());
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let (l1, l2) = (1.0 + h, 1.0 - h);
        let v1 = DVector::from_vec(vec![0.5, l1 - 1.5]).normalize();
        let v2 = DVector::from_vec(vec![0.5, l2 - 1.5]).normalize();
        let lhs = &v1 * v1.transpose() * (-l1).exp() + &v2 * v2.transpose() * (-l2).exp();
        let diff = lhs - e1 * e2;
        let exact = SymmetricEigen::new(diff.transpose() * &diff).eigenvalues.max().sqrt();
        assert!((r - exact).abs() < 1e-10);
        assert!(r > 1e-3);
    }

    #[test]
    fn yosida_examples() {
        let (j, al) = yosida(&DMatrix::from_element(1, 1, 2.0), 0.5).unwrap();
        assert!((al[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((j[(0, 0)] - 0.5).abs() < 1e-15);
        let a = [0.5, 3.0, 40.0];
        let (_, al) = yosida(&diag(&a), 0.1).unwrap();
        for (i, v) in a.iter().enumerate() {
            assert!((al[(i, i)] - v / (1.0 + 0.1 * v)).abs() < 1e-14);
        }
        assert!(yosida(&diag(&[-2.0]), 0.5).is_err());
        assert!(yosida(&diag(&[1.0]), 0.0).is_err());
    }

    #[test]
    fn yosida_error_shrinks_with_lambda() {
        let a = MonotoneMatrix::random_symmetric(30, 11);
        let mut last = f64::INFINITY;
        for lambda in [1e-1, 1e-2, 1e-3, 1e-4] {
            let (j, al) = yosida(a.matrix(), lambda).unwrap();
            assert!(spectral_norm(&j) <= 1.0 + 1e-12);
            assert!(yosida_probe_ratio(a.matrix(), &al, 10, 5) <= 1.0 + 1e-12);
            let err = probe_max(30, 10, 5, |v| (&al * v - a.matrix() * v).norm());
            assert!(err < last);
            last = err;
        }
    }

    #[test]
    fn diagonal_flow_matches_scalar_solution() {
        let q = DMatrix::identity(2, 2);
        let pair = CommutingPair::new(q, vec![(Block::Scalar(2.0), Block::Scalar(3.0)), (Block::Scalar(0.5), Block::Scalar(0.1))]).unwrap();
        let u0 = DVector::from_vec(vec![1.0, 0.0]);
        let u = yosida_flow(&pair, &u0, 0.1, 1.0).unwrap();
        let exact = (-(2.0 / 1.2) - 3.0 / 1.3f64).exp();
        assert!((u[0] - exact).abs() < 1e-14);
        let table = yosida_flow_convergence(&pair, &u0, &[0.1, 0.01], 1.0).unwrap();
        assert!(table.max_ratio <= 1.0);
        let same = table.rows.iter().find(|r| r.lambda == r.mu).unwrap();
        assert_eq!(same.ratio, 0.0);
    }

    #[test]
    fn symmetric_pairs_converge_at_first_order() {
        let pair = CommutingPair::random_symmetric(DEFAULT_DIM, 3);
        let u0 = DVector::from_vec(seeded_normal_vector(DEFAULT_DIM, 4));
        let (slope, _) = yosida_rate_slope(&pair, &u0, &[1e-1, 1e-2, 1e-3], 1e-5, 1.0).unwrap();
        assert!((slope - 1.0).abs() < 0.15, "{slope}");
    }

    #[test]
    fn rotational_pairs_converge_at_half_order() {
        let pair = CommutingPair::rotational(50, 1e4, 5);
        let u0 = pair.rough_vector();
        let (slope, _) = yosida_rate_slope(&pair, &u0, &[1e-1, 1e-2, 1e-3], 1e-5, 1.0).unwrap();
        assert!((slope - 0.5).abs() < 0.15, "{slope}");
        let table = yosida_flow_convergence(&pair, &u0, &[1e-1, 1e-2, 1e-3], 1.0).unwrap();
        assert!(table.max_ratio <= 1.0);
    }

    #[test]
    fn composition_examples() {
        let a = MonotoneMatrix::random_symmetric(10, 1);
        let (p, s) = compose_piecewise(&[(a.matrix().clone(), 0.7)]).unwrap();
        assert!((&p - &s).amax() < 1e-14);
        assert!((&p - expm(a.matrix(), 0.7)).amax() < 1e-14);
        let (p, s) = compose_piecewise(&[(a.matrix().clone(), 0.3), (a.matrix().clone(), 0.4)]).unwrap();
        assert!(spectral_norm(&(&p - &s)) < 1e-12);
        assert!(compose_piecewise(&[(a.matrix().clone(), 0.0)]).is_err());

        let segs: Vec<(DMatrix<f64>, f64)> = commuting_family(DEFAULT_DIM, 5, 9)
            .into_iter()
            .enumerate()
            .map(|(i, a)| (a, 0.1 + 0.05 * i as f64))
            .collect();
        let (p, s) = compose_piecewise(&segs).unwrap();
        assert!(spectral_norm(&(p - s)) <= 1e-10);
    }

    #[test]
    fn pair_validation() {
        let q = DMatrix::identity(2, 2);
        assert!(CommutingPair::new(q.clone(), vec![(Block::Scalar(-1.0), Block::Scalar(1.0)), (Block::Scalar(1.0), Block::Scalar(1.0))]).is_err());
        assert!(CommutingPair::new(q.clone(), vec![(Block::Scalar(1.0), Block::Rotation { damping: 0.0, freq: 1.0 })]).is_err());
        assert!(CommutingPair::new(q * 2.0, vec![(Block::Scalar(1.0), Block::Scalar(1.0)), (Block::Scalar(1.0), Block::Scalar(1.0))]).is_err());
        assert!(MonotoneMatrix::new(diag(&[1.0, -0.5])).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn semigroup_contracts(seed in 0u64..10_000, t in 0.0f64..5.0) {
            let a = MonotoneMatrix::random_symmetric(12, seed);
            prop_assert!(contraction_ratio(a.matrix(), t, 5, seed) <= 1.0 + 1e-12);
            prop_assert!(derivative_ratio(a.matrix(), t, 5, seed) <= 1.0 + 1e-12);
        }

        #[test]
        fn rotations_contract(seed in 0u64..10_000, t in 0.0f64..3.0) {
            let pair = CommutingPair::rotational(6, 100.0, seed);
            let sum = pair.a1() + pair.a2();
            prop_assert!(contraction_ratio(&sum, t, 5, seed) <= 1.0 + 1e-12);
        }
    }
}
