//! Barrier-free reference prices: the lognormal closed form for one asset and
//! a Fourier solver on a periodic log-grid for one or two assets.
//!
//! Fourier convention: `û(ξ) = ∫ u(x) e^{-2πi x·ξ} dx`, under which the
//! operator acts as multiplication by
//! `P(ξ) = (2π)²/2 Σ ρ_ij σ_i σ_j ξ_i ξ_j + 2πi Σ b_i ξ_i + r + d`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::coefficients::{
    averaged_operator_coeffs, drift_vector, integrate_coefficients, AveragedCoefficients, MarketModel,
};
use crate::{Error, Result};

/// Wrap-around mass above which a periodic solve is rejected.
pub const WRAP_THRESHOLD: f64 = 1e-8;

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Standard normal distribution function.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptionKind {
    Call,
    Put,
}

/// Lognormal price with carry `r - m` and discount `e^{-(r + d) tenor}`.
#[allow(clippy::too_many_arguments)]
pub fn bs_closed_form(
    spot: f64,
    strike: f64,
    r_bar: f64,
    m_bar: f64,
    d_bar: f64,
    sigma_bar: f64,
    tenor: f64,
    kind: OptionKind,
) -> f64 {
    let forward = spot * ((r_bar - m_bar) * tenor).exp();
    let discount = (-(r_bar + d_bar) * tenor).exp();
    let sd = sigma_bar * tenor.sqrt();
    let (d1, d2) = if sd > 0.0 {
        let d1 = ((forward / strike).ln() + 0.5 * sd * sd) / sd;
        (d1, d1 - sd)
    } else {
        let s = if forward > strike { f64::INFINITY } else { f64::NEG_INFINITY };
        (s, s)
    };
    match kind {
        OptionKind::Call => discount * (forward * norm_cdf(d1) - strike * norm_cdf(d2)),
        OptionKind::Put => discount * (strike * norm_cdf(-d2) - forward * norm_cdf(-d1)),
    }
}

/// Closed form with inputs averaged over market times `[tau0, maturity]`.
pub fn bs_averaged(model: &MarketModel, spot: f64, strike: f64, tau0: f64, maturity: f64, kind: OptionKind) -> Result<f64> {
    if model.n() != 1 {
        return Err(Error::Shape { what: "closed-form model dimension", expected: 1, got: model.n() });
    }
    let avg = averaged_operator_coeffs(model, tau0, maturity)?;
    Ok(bs_closed_form(spot, strike, avg.r_bar, avg.m_bar, avg.d_bar, avg.sigma_bar[0], maturity - tau0, kind))
}

/// `P(ξ)` split into its diffusion matrix `(ρ_ij σ_i σ_j)`, drift `b` and
/// reaction `r + d`.
#[derive(Debug, Clone, PartialEq)]
pub struct CharacteristicExponent {
    pub covariance: DMatrix<f64>,
    pub drift: Vec<f64>,
    pub reaction: f64,
}

impl CharacteristicExponent {
    pub fn eval(&self, xi: &[f64]) -> Complex64 {
        let n = self.drift.len();
        let mut quad = 0.0;
        let mut lin = 0.0;
        for i in 0..n {
            lin += self.drift[i] * xi[i];
            for j in 0..n {
                quad += self.covariance[(i, j)] * xi[i] * xi[j];
            }
        }
        Complex64::new(TWO_PI * TWO_PI / 2.0 * quad + self.reaction, TWO_PI * lin)
    }

    fn from_averaged(avg: &AveragedCoefficients) -> Self {
        Self { covariance: avg.a_bar.clone() * 2.0, drift: avg.b_bar.clone(), reaction: avg.q_bar }
    }
}

/// `P(t, ξ)` at market time `t`.
pub fn characteristic_exponent(model: &MarketModel, t: f64, xi: &[f64]) -> Result<Complex64> {
    let p = model.market_at(t)?;
    let ce = CharacteristicExponent {
        covariance: p.covariance(),
        drift: drift_vector(&p.sigma_sq, p.r, p.m),
        reaction: p.r + p.d,
    };
    Ok(ce.eval(xi))
}

/// `P̄(ξ)` from the averaged coefficients.
pub fn averaged_exponent(avg: &AveragedCoefficients, xi: &[f64]) -> Complex64 {
    CharacteristicExponent::from_averaged(avg).eval(xi)
}

/// How the Fourier multiplier is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiplierRoute {
    /// `exp(-∫ P(s, ξ) ds)` from exact segment integrals.
    TimeDependent,
    /// `exp(-(T - τ0) P̄(ξ))`.
    Averaged,
}

/// Exponent of the multiplier, `∫P` or `(T - τ0) P̄`, as a quadratic form.
pub fn integrated_exponent(model: &MarketModel, tau0: f64, maturity: f64, route: MultiplierRoute) -> Result<CharacteristicExponent> {
    Ok(match route {
        MultiplierRoute::TimeDependent => {
            let ic = integrate_coefficients(model, tau0, maturity)?;
            CharacteristicExponent { covariance: ic.covariance, drift: ic.drift, reaction: ic.reaction }
        }
        MultiplierRoute::Averaged => {
            let avg = averaged_operator_coeffs(model, tau0, maturity)?;
            let h = maturity - tau0;
            let ce = CharacteristicExponent::from_averaged(&avg);
            CharacteristicExponent {
                covariance: ce.covariance * h,
                drift: ce.drift.iter().map(|b| b * h).collect(),
                reaction: ce.reaction * h,
            }
        }
    })
}

/// Largest `|e^{-∫P} - e^{-(T-τ0) P̄}|` over the given frequencies.
pub fn multiplier_identity_residual(model: &MarketModel, tau0: f64, maturity: f64, xis: &[Vec<f64>]) -> Result<f64> {
    let td = integrated_exponent(model, tau0, maturity, MultiplierRoute::TimeDependent)?;
    let av = integrated_exponent(model, tau0, maturity, MultiplierRoute::Averaged)?;
    Ok(xis
        .iter()
        .map(|xi| ((-td.eval(xi)).exp() - (-av.eval(xi)).exp()).norm())
        .fold(0.0, f64::max))
}

/// Periodic grid: `dims[i]` nodes `lower[i] + k h[i]`, `k < dims[i]`,
/// axis 0 fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierGrid {
    dims: Vec<usize>,
    lower: Vec<f64>,
    spacing: Vec<f64>,
}

impl FourierGrid {
    /// Period `upper - lower` per axis with `dims` nodes each.
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, dims: Vec<usize>) -> Result<Self> {
        let n = dims.len();
        if !(1..=2).contains(&n) {
            return Err(Error::Shape { what: "Fourier grid dimension (1 or 2)", expected: 2, got: n });
        }
        if lower.len() != n || upper.len() != n {
            return Err(Error::Shape { what: "Fourier grid bounds", expected: n, got: lower.len() });
        }
        if dims.iter().any(|&d| d < 4) || lower.iter().zip(&upper).any(|(a, b)| !(b > a)) {
            return Err(Error::Domain("Fourier grid needs at least 4 nodes and a positive period".into()));
        }
        let spacing = (0..n).map(|i| (upper[i] - lower[i]) / dims[i] as f64).collect();
        Ok(Self { dims, lower, spacing })
    }

    /// Periodic grid whose nodes coincide with those of a finite-difference
    /// grid of `nodes` points per axis on `[lower, upper]`.
    pub fn matching(lower: Vec<f64>, upper: Vec<f64>, nodes: &[usize]) -> Result<Self> {
        Self::new(lower, upper, nodes.iter().map(|k| k - 1).collect())
    }

    pub fn n(&self) -> usize {
        self.dims.len()
    }
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }
    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        self.dims
            .iter()
            .map(|&d| {
                let k = flat % d;
                flat /= d;
                k
            })
            .collect()
    }

    pub fn coords(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat)
            .iter()
            .enumerate()
            .map(|(i, &k)| self.lower[i] + k as f64 * self.spacing[i])
            .collect()
    }

    /// Every grid frequency vector, in storage order.
    pub fn frequencies(&self) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|flat| self.multi_index(flat).iter().enumerate().map(|(i, &k)| self.frequency(i, k).0).collect())
            .collect()
    }

    /// Signed frequency of index `k` on `axis`, and whether it is the
    /// Nyquist index.
    fn frequency(&self, axis: usize, k: usize) -> (f64, bool) {
        let n = self.dims[axis];
        let period = n as f64 * self.spacing[axis];
        let signed = if 2 * k < n { k as f64 } else { k as f64 - n as f64 };
        (signed / period, 2 * k == n)
    }

    /// Sample `f` at every node.
    pub fn sample(&self, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        (0..self.len()).map(|k| f(&self.coords(k))).collect()
    }
}

fn fft_nd(grid: &FourierGrid, data: &mut [Complex64], inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let dims = grid.dims();
    let mut stride = 1;
    for &len in dims {
        let fft = if inverse { planner.plan_fft_inverse(len) } else { planner.plan_fft_forward(len) };
        let total = data.len();
        let outer = total / (len * stride);
        let mut line = vec![Complex64::new(0.0, 0.0); len];
        for o in 0..outer {
            for s in 0..stride {
                let base = o * len * stride + s;
                for k in 0..len {
                    line[k] = data[base + k * stride];
                }
                fft.process(&mut line);
                for k in 0..len {
                    data[base + k * stride] = line[k];
                }
            }
        }
        stride *= len;
    }
    if inverse {
        let scale = 1.0 / data.len() as f64;
        data.iter_mut().for_each(|v| *v *= scale);
    }
}

fn multiplier(grid: &FourierGrid, exponent: &CharacteristicExponent) -> Vec<Complex64> {
    (0..grid.len())
        .map(|flat| {
            let idx = grid.multi_index(flat);
            let mut xi = Vec::with_capacity(grid.n());
            let mut nyquist = false;
            for (axis, &k) in idx.iter().enumerate() {
                let (f, ny) = grid.frequency(axis, k);
                xi.push(f);
                nyquist |= ny;
            }
            let m = (-exponent.eval(&xi)).exp();
            // the Nyquist bin stands for both ±ξ; keep the conjugate-symmetric part
            if nyquist {
                Complex64::new(m.re, 0.0)
            } else {
                m
            }
        })
        .collect()
}

/// Fraction of the periodic Green's function's absolute mass lying more than
/// a quarter period away from the origin along some axis.
pub fn wrap_mass(grid: &FourierGrid, exponent: &CharacteristicExponent) -> f64 {
    let mut kernel = multiplier(grid, exponent);
    fft_nd(grid, &mut kernel, true);
    let mut total = 0.0;
    let mut far = 0.0;
    for (flat, v) in kernel.iter().enumerate() {
        let m = v.norm();
        total += m;
        let idx = grid.multi_index(flat);
        let outside = idx.iter().zip(grid.dims()).any(|(&k, &d)| {
            let dist = k.min(d - k);
            4 * dist > d
        });
        if outside {
            far += m;
        }
    }
    if total > 0.0 {
        far / total
    } else {
        0.0
    }
}

/// Output of a periodic solve.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierField {
    pub grid: FourierGrid,
    pub values: Vec<f64>,
    /// `max |Im u| / ‖g‖_∞` before taking the real part.
    pub imag_residue: f64,
    pub wrap_mass: f64,
}

impl FourierField {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.grid.n();
        let mut header: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
        header.push("value".into());
        w.write_record(&header)?;
        for (k, v) in self.values.iter().enumerate() {
            let mut rec: Vec<String> = self.grid.coords(k).iter().map(|x| format!("{x:.17e}")).collect();
            rec.push(format!("{v:.17e}"));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Solve the barrier-free problem from `g` at maturity back to `tau0` on a
/// periodic grid.
pub fn fourier_solve(
    model: &MarketModel,
    grid: &FourierGrid,
    g: &[f64],
    tau0: f64,
    maturity: f64,
    route: MultiplierRoute,
) -> Result<FourierField> {
    if model.n() != grid.n() {
        return Err(Error::Shape { what: "Fourier grid dimension", expected: model.n(), got: grid.n() });
    }
    if g.len() != grid.len() {
        return Err(Error::Shape { what: "Fourier initial data", expected: grid.len(), got: g.len() });
    }
    let exponent = integrated_exponent(model, tau0, maturity, route)?;
    let wrap = wrap_mass(grid, &exponent);
    if wrap > WRAP_THRESHOLD {
        return Err(Error::Truncation { wrap_mass: wrap, threshold: WRAP_THRESHOLD });
    }
    let mut data: Vec<Complex64> = g.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_nd(grid, &mut data, false);
    for (d, m) in data.iter_mut().zip(multiplier(grid, &exponent)) {
        *d *= m;
    }
    fft_nd(grid, &mut data, true);
    let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let imag = data.iter().fold(0.0f64, |a, v| a.max(v.im.abs()));
    Ok(FourierField {
        grid: grid.clone(),
        values: data.iter().map(|v| v.re).collect(),
        imag_residue: if gmax > 0.0 { imag / gmax } else { imag },
        wrap_mass: wrap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::CoefficientSchedule;
    use proptest::prelude::*;

    fn c(v: f64) -> CoefficientSchedule {
        CoefficientSchedule::constant(v, 0.0, 1.0).unwrap()
    }
    fn halves(a: f64, b: f64) -> CoefficientSchedule {
        CoefficientSchedule::piecewise_constant(&[0.0, 0.5, 1.0], &[a, b]).unwrap()
    }

    #[test]
    fn normal_cdf_against_quadrature() {
        let density = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        for x in [-3.0, -1.0, -0.2, 0.0, 0.7, 2.5] {
            let n = 400_000;
            let h = (x + 8.0) / n as f64;
            let q: f64 = (0..n).map(|k| density(-8.0 + (k as f64 + 0.5) * h)).sum::<f64>() * h;
            assert!((norm_cdf(x) - q).abs() < 1e-10, "{x}");
        }
    }

    #[test]
    fn closed_form_examples() {
        let call = bs_closed_form(100.0, 100.0, 0.05, 0.0, 0.0, 0.2, 1.0, OptionKind::Call);
        // evaluated independently: d1 = 0.35, d2 = 0.15
        let oracle = 100.0 * norm_cdf(0.35) - 100.0 * (-0.05f64).exp() * norm_cdf(0.15);
        assert!((call - oracle).abs() < 1e-12);
        assert!((call - 10.4506).abs() < 5e-5);
        let put = bs_closed_form(100.0, 100.0, 0.05, 0.0, 0.0, 0.2, 1.0, OptionKind::Put);
        assert!((put - (call - 100.0 + 100.0 * (-0.05f64).exp())).abs() < 1e-12);
        assert!((put - 5.5735).abs() < 5e-5);
        let limit = bs_closed_form(100.0, 100.0, 0.05, 0.0, 0.0, 1e-9, 1.0, OptionKind::Call);
        assert!((limit - (100.0 - 100.0 * (-0.05f64).exp())).abs() < 1e-6);
        assert!((limit - 4.8771).abs() < 5e-5);
    }

    proptest! {
        #[test]
        fn parity_and_vega_sign(
            s in 50.0f64..150.0, k in 50.0f64..150.0, r in -0.02f64..0.08,
            m in 0.0f64..0.04, d in 0.0f64..0.05, vol in 0.05f64..0.6, t in 0.1f64..3.0,
        ) {
            let call = bs_closed_form(s, k, r, m, d, vol, t, OptionKind::Call);
            let put = bs_closed_form(s, k, r, m, d, vol, t, OptionKind::Put);
            let disc = (-(r + d) * t).exp();
            let parity = disc * (s * ((r - m) * t).exp() - k);
            prop_assert!((call - put - parity).abs() < 1e-12 * s.max(k));
            let up = vol * 1.01;
            prop_assert!(bs_closed_form(s, k, r, m, d, up, t, OptionKind::Call) >= call - 1e-12 * s);
            prop_assert!(bs_closed_form(s, k, r, m, d, up, t, OptionKind::Put) >= put - 1e-12 * s);
        }
    }

    #[test]
    fn exponent_examples() {
        let model = MarketModel::constant(0.03, 0.01, 0.02, &[0.2], &[], 1.0).unwrap();
        let p0 = characteristic_exponent(&model, 0.3, &[0.0]).unwrap();
        assert_eq!(p0, Complex64::new(0.05, 0.0));
        let bare = MarketModel::constant(0.0, 0.0, 0.0, &[0.2], &[], 1.0).unwrap();
        let p1 = characteristic_exponent(&bare, 0.3, &[1.0]).unwrap();
        let want = Complex64::new(TWO_PI * TWO_PI * 0.02, TWO_PI * 0.02);
        assert!((p1 - want).norm() < 1e-14);
    }

    fn time_dependent_2d() -> MarketModel {
        let sig1 = CoefficientSchedule::linear(0.0, 1.0, 0.2, 0.35).unwrap();
        MarketModel::new(
            halves(0.02, 0.04),
            c(0.01),
            halves(0.0, 0.01),
            vec![sig1, halves(0.3, 0.2)],
            vec![(0, 1, halves(0.5, -0.1))],
        )
        .unwrap()
    }

    #[test]
    fn exponent_average_equals_averaged_exponent() {
        let model = time_dependent_2d();
        let avg = averaged_operator_coeffs(&model, 0.0, 1.0).unwrap();
        for xi in [[0.3, -0.2], [1.5, 0.7], [-2.0, 4.0]] {
            // Simpson on each half is exact: P is cubic in t there
            let mut integral = Complex64::new(0.0, 0.0);
            for (a, b) in [(0.0, 0.5), (0.5, 1.0)] {
                let mid = 0.5 * (a + b);
                let at = |t: f64| {
                    let p = model.market_near(t, mid);
                    CharacteristicExponent {
                        covariance: p.covariance(),
                        drift: drift_vector(&p.sigma_sq, p.r, p.m),
                        reaction: p.r + p.d,
                    }
                    .eval(&xi)
                };
                integral += (at(a) + at(mid) * 4.0 + at(b)) * ((b - a) / 6.0);
            }
            let pbar = averaged_exponent(&avg, &xi);
            assert!((integral - pbar).norm() < 1e-12 * pbar.norm().max(1.0), "{integral} vs {pbar}");
        }
    }

    #[test]
    fn multiplier_identity_holds_pointwise() {
        let model = time_dependent_2d();
        let xis: Vec<Vec<f64>> = (0..200).map(|k| vec![(k as f64 - 100.0) * 0.05, (k % 17) as f64 * 0.3 - 2.0]).collect();
        assert!(multiplier_identity_residual(&model, 0.0, 1.0, &xis).unwrap() <= 1e-12);
    }

    #[test]
    fn gaussian_bump_spreads_like_the_heat_kernel() {
        // drift integrates to zero and q = 0: r = mean(sigma^2) / 2, d = -r
        let var = 0.5 * 0.01 + 0.5 * 0.2608 * 0.2608;
        let model = MarketModel::new(c(var / 2.0), c(0.0), c(-var / 2.0), vec![halves(0.1, 0.2608)], vec![]).unwrap();
        let s2 = 0.04;
        let grid = FourierGrid::new(vec![-4.0], vec![4.0], vec![512]).unwrap();
        let g = grid.sample(|x| (-x[0] * x[0] / (2.0 * s2)).exp());
        let out = fourier_solve(&model, &grid, &g, 0.0, 1.0, MultiplierRoute::TimeDependent).unwrap();
        let w2 = s2 + var;
        let exact = grid.sample(|x| (s2 / w2).sqrt() * (-x[0] * x[0] / (2.0 * w2)).exp());
        let core: Vec<usize> = (128..384).collect();
        let num: f64 = core.iter().map(|&k| (out.values[k] - exact[k]).powi(2)).sum();
        let den: f64 = core.iter().map(|&k| exact[k].powi(2)).sum();
        assert!((num / den).sqrt() < 1e-6);
        assert!(out.imag_residue < 1e-10);
        let averaged = fourier_solve(&model, &grid, &g, 0.0, 1.0, MultiplierRoute::Averaged).unwrap();
        for (a, b) in out.values.iter().zip(&averaged.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fourier_put_matches_closed_form() {
        let model = MarketModel::new(halves(0.02, 0.04), c(0.01), c(0.005), vec![halves(0.2, 0.3)], vec![]).unwrap();
        let k: f64 = 100.0;
        let (lo, hi) = (k.ln() - 5.0, k.ln() + 5.0);
        let grid = FourierGrid::new(vec![lo], vec![hi], vec![4096]).unwrap();
        let g = grid.sample(|x| (k - x[0].exp()).max(0.0));
        let out = fourier_solve(&model, &grid, &g, 0.0, 1.0, MultiplierRoute::TimeDependent).unwrap();
        let atm = grid.dims()[0] / 2;
        assert!((grid.coords(atm)[0] - k.ln()).abs() < 1e-12);
        let want = bs_averaged(&model, k, k, 0.0, 1.0, OptionKind::Put).unwrap();
        assert!(((out.values[atm] - want) / want).abs() < 1e-4, "{} vs {want}", out.values[atm]);
    }

    #[test]
    fn narrow_grid_is_rejected() {
        let model = MarketModel::constant(0.0, 0.0, 0.0, &[0.5], &[], 1.0).unwrap();
        let grid = FourierGrid::new(vec![-0.5], vec![0.5], vec![64]).unwrap();
        let g = vec![1.0; 64];
        assert!(matches!(
            fourier_solve(&model, &grid, &g, 0.0, 1.0, MultiplierRoute::Averaged),
            Err(Error::Truncation { .. })
        ));
    }

    #[test]
    fn two_dimensional_solve_is_real_and_matches_averaged_route() {
        let model = time_dependent_2d();
        let grid = FourierGrid::new(vec![-1.0, -1.0], vec![11.0, 11.0], vec![128, 128]).unwrap();
        let g = grid.sample(|x| (200.0 - x[0].exp() - x[1].exp()).max(0.0));
        let a = fourier_solve(&model, &grid, &g, 0.0, 1.0, MultiplierRoute::TimeDependent).unwrap();
        let b = fourier_solve(&model, &grid, &g, 0.0, 1.0, MultiplierRoute::Averaged).unwrap();
        assert!(a.imag_residue < 1e-10);
        let diff = a.values.iter().zip(&b.values).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(diff < 1e-12 * 200.0);
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 128 * 128);
    }
}
