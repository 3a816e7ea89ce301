//! Risk-neutral Monte Carlo pricer with discrete knock-out monitoring.
//!
//! Log-price increments over each step are sampled exactly: their mean and
//! covariance are the segment integrals of the coefficients. Every antithetic
//! pair (or single path) draws from its own ChaCha stream, so results do not
//! depend on how paths are spread over threads.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{integrate_coefficients, MarketModel};
use crate::domain_grid::DomainSpec;
use crate::linalg::pairwise_sum;
use crate::timestepper::ProblemSpec;
use crate::{Error, Result};

pub const DEFAULT_STEPS_PER_YEAR: usize = 252;
/// Fewest paths accepted for a reported price.
pub const MIN_REPORTED_PATHS: usize = 1000;
/// Row cap of the per-path CSV dump.
pub const DUMP_CAP: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MCConfig {
    pub paths: usize,
    #[serde(default = "default_steps")]
    pub steps_per_year: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub antithetic: bool,
}

fn default_steps() -> usize {
    DEFAULT_STEPS_PER_YEAR
}

impl MCConfig {
    pub fn new(paths: usize, seed: u64) -> Self {
        Self { paths, steps_per_year: DEFAULT_STEPS_PER_YEAR, seed, antithetic: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.paths == 0 {
            return Err(Error::Config("Monte Carlo needs at least one path".into()));
        }
        if self.steps_per_year == 0 {
            return Err(Error::Config("steps_per_year must be positive".into()));
        }
        if self.antithetic && self.paths % 2 != 0 {
            return Err(Error::Config(format!("antithetic sampling needs an even path count, got {}", self.paths)));
        }
        Ok(())
    }
}

/// Exact Gaussian law of one step's log increment.
#[derive(Debug, Clone)]
struct StepLaw {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
}

fn step_laws(model: &MarketModel, t0: f64, t1: f64, steps_per_year: usize) -> Result<Vec<StepLaw>> {
    let mut knots = vec![t0];
    knots.extend(model.breakpoints(t0, t1));
    knots.push(t1);
    let dt = 1.0 / steps_per_year as f64;
    let mut laws: Vec<StepLaw> = Vec::new();
    let mut last: Option<(DMatrix<f64>, DMatrix<f64>)> = None;
    for w in knots.windows(2) {
        let (a, b) = (w[0], w[1]);
        let count = ((b - a) / dt - 1e-9).ceil().max(1.0) as usize;
        for k in 0..count {
            let s0 = a + (b - a) * k as f64 / count as f64;
            let s1 = if k + 1 == count { b } else { a + (b - a) * (k + 1) as f64 / count as f64 };
            let ic = integrate_coefficients(model, s0, s1)?;
            let factor = match &last {
                Some((cov, l)) if *cov == ic.covariance => l.clone(),
                _ => {
                    let l = Cholesky::new(ic.covariance.clone())
                        .ok_or_else(|| Error::EllipticityViolation {
                            time: s0,
                            min_eigenvalue: ic.covariance.clone().symmetric_eigenvalues().min(),
                        })?
                        .l();
                    last = Some((ic.covariance.clone(), l.clone()));
                    l
                }
            };
            laws.push(StepLaw { mean: DVector::from_iterator(model.n(), ic.drift.iter().map(|b| -b)), factor });
        }
    }
    Ok(laws)
}

/// Terminal log-prices of every path and whether it was knocked out.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub n: usize,
    /// Path-major: `log_terminal[p * n + i]`.
    pub log_terminal: Vec<f64>,
    pub knocked: Vec<bool>,
    /// Monitoring dates per path.
    pub steps: usize,
}

impl PathSet {
    pub fn paths(&self) -> usize {
        self.knocked.len()
    }

    pub fn terminal(&self, p: usize) -> &[f64] {
        &self.log_terminal[p * self.n..(p + 1) * self.n]
    }

    /// CSV: path, knocked, log and asset terminal values; at most
    /// [`DUMP_CAP`] rows.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["path".to_string(), "knocked".to_string()];
        header.extend((0..self.n).map(|i| format!("x{i}")));
        header.extend((0..self.n).map(|i| format!("y{i}")));
        w.write_record(&header)?;
        for p in 0..self.paths().min(DUMP_CAP) {
            let x = self.terminal(p);
            let mut rec = vec![p.to_string(), (self.knocked[p] as u8).to_string()];
            rec.extend(x.iter().map(|v| format!("{v:.17e}")));
            rec.extend(x.iter().map(|v| format!("{:.17e}", v.exp())));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Simulate from `y0` at market time `t0` to `t1`. With a domain, a path is
/// knocked out the first monitoring date it is outside.
pub fn simulate_terminal(
    model: &MarketModel,
    y0: &[f64],
    t0: f64,
    t1: f64,
    domain: Option<&DomainSpec>,
    cfg: &MCConfig,
) -> Result<PathSet> {
    cfg.validate()?;
    let n = model.n();
    if y0.len() != n {
        return Err(Error::Shape { what: "initial asset vector", expected: n, got: y0.len() });
    }
    if y0.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Domain("initial asset values must be positive".into()));
    }
    if let Some(d) = domain {
        if !d.contains(y0) {
            return Err(Error::Domain("initial point lies outside the knock-out region".into()));
        }
    }
    if !(t1 > t0) {
        return Err(Error::InvalidInterval { t0, t1 });
    }
    let laws = step_laws(model, t0, t1, cfg.steps_per_year)?;
    let x0: Vec<f64> = y0.iter().map(|v| v.ln()).collect();
    let group = if cfg.antithetic { 2 } else { 1 };
    let groups = cfg.paths / group;

    let results: Vec<(Vec<f64>, Vec<bool>)> = (0..groups)
        .into_par_iter()
        .map(|gidx| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(gidx as u64);
            let mut xs = vec![x0.clone(); group];
            let mut alive = vec![true; group];
            let mut z = DVector::zeros(n);
            for law in &laws {
                for v in z.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                let shock = &law.factor * &z;
                for (s, x) in xs.iter_mut().enumerate() {
                    let sign = if s == 0 { 1.0 } else { -1.0 };
                    for i in 0..n {
                        x[i] += law.mean[i] + sign * shock[i];
                    }
                    if alive[s] {
                        if let Some(d) = domain {
                            let y: Vec<f64> = x.iter().map(|v| v.exp()).collect();
                            if !d.contains(&y) {
                                alive[s] = false;
                            }
                        }
                    }
                }
            }
            (xs.concat(), alive.iter().map(|a| !a).collect())
        })
        .collect();

    let mut log_terminal = Vec::with_capacity(cfg.paths * n);
    let mut knocked = Vec::with_capacity(cfg.paths);
    for (x, k) in results {
        log_terminal.extend(x);
        knocked.extend(k);
    }
    Ok(PathSet { n, log_terminal, knocked, steps: laws.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MCResult {
    pub price: f64,
    pub std_error: f64,
    pub knockout_fraction: f64,
    pub paths: usize,
}

/// Mean and standard error of `values`; antithetic pairs are averaged first
/// so the error treats each pair as one sample.
pub fn mean_and_error(values: &[f64], antithetic: bool) -> (f64, f64) {
    let samples: Vec<f64> = if antithetic {
        values.chunks(2).map(|c| 0.5 * (c[0] + c[1])).collect()
    } else {
        values.to_vec()
    };
    let m = samples.len() as f64;
    let mean = pairwise_sum(&samples) / m;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = samples.iter().map(|v| (v - mean).powi(2)).collect();
    let var = pairwise_sum(&dev) / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// Discounted expectation of `payoff` over surviving paths.
#[allow(clippy::too_many_arguments)]
pub fn price_mc_with(
    model: &MarketModel,
    y0: &[f64],
    t0: f64,
    t1: f64,
    domain: Option<&DomainSpec>,
    payoff: impl Fn(&[f64]) -> f64 + Sync,
    cfg: &MCConfig,
) -> Result<MCResult> {
    if cfg.paths < MIN_REPORTED_PATHS {
        return Err(Error::Config(format!(
            "reported Monte Carlo prices need at least {MIN_REPORTED_PATHS} paths, got {}",
            cfg.paths
        )));
    }
    let set = simulate_terminal(model, y0, t0, t1, domain, cfg)?;
    let discount = (-integrate_coefficients(model, t0, t1)?.reaction).exp();
    let values: Vec<f64> = (0..set.paths())
        .into_par_iter()
        .map(|p| {
            if set.knocked[p] {
                0.0
            } else {
                let y: Vec<f64> = set.terminal(p).iter().map(|v| v.exp()).collect();
                discount * payoff(&y)
            }
        })
        .collect();
    let (price, std_error) = mean_and_error(&values, cfg.antithetic);
    let knocked = set.knocked.iter().filter(|&&k| k).count();
    Ok(MCResult {
        price,
        std_error,
        knockout_fraction: knocked as f64 / set.paths() as f64,
        paths: set.paths(),
    })
}

/// Price `problem` at spot `y0`. Barrier-free problems ignore the
/// truncation box.
pub fn price_mc(model: &MarketModel, problem: &ProblemSpec, y0: &[f64], cfg: &MCConfig) -> Result<MCResult> {
    problem.validate(model)?;
    let payoff = &problem.payoff;
    if payoff.at(y0).is_none() {
        return Err(Error::Config("Monte Carlo needs a pointwise payoff".into()));
    }
    let domain = (!problem.barrier_free).then_some(&problem.domain);
    price_mc_with(model, y0, problem.tau0, problem.maturity, domain, |y| payoff.at(y).unwrap_or(0.0), cfg)
}

/// Sample moments of one terminal log-coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Moments {
    pub mean: f64,
    pub mean_se: f64,
    pub variance: f64,
    pub variance_se: f64,
}

pub fn log_moments(set: &PathSet, asset: usize) -> Moments {
    let xs: Vec<f64> = (0..set.paths()).map(|p| set.terminal(p)[asset]).collect();
    let m = xs.len() as f64;
    let mean = pairwise_sum(&xs) / m;
    let d2: Vec<f64> = xs.iter().map(|x| (x - mean).powi(2)).collect();
    let d4: Vec<f64> = d2.iter().map(|v| v * v).collect();
    let variance = pairwise_sum(&d2) / (m - 1.0);
    let m4 = pairwise_sum(&d4) / m;
    Moments {
        mean,
        mean_se: (variance / m).sqrt(),
        variance,
        variance_se: ((m4 - variance * variance).max(0.0) / m).sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::CoefficientSchedule;
    use crate::domain_grid::PayoffSpec;

    fn c(v: f64) -> CoefficientSchedule {
        CoefficientSchedule::constant(v, 0.0, 1.0).unwrap()
    }
    fn halves(a: f64, b: f64) -> CoefficientSchedule {
        CoefficientSchedule::piecewise_constant(&[0.0, 0.5, 1.0], &[a, b]).unwrap()
    }

    #[test]
    fn zero_noise_limit() {
        let model = MarketModel::constant(0.0, 0.0, 0.0, &[2e-6], &[], 1.0).unwrap();
        let set = simulate_terminal(&model, &[100.0], 0.0, 1.0, None, &MCConfig::new(2000, 1)).unwrap();
        for p in 0..set.paths() {
            assert!((set.terminal(p)[0] - 100f64.ln()).abs() < 1e-4);
        }
    }

    #[test]
    fn constant_model_log_mean() {
        let model = MarketModel::constant(0.05, 0.01, 0.0, &[0.25], &[], 1.0).unwrap();
        let cfg = MCConfig { steps_per_year: 4, ..MCConfig::new(100_000, 2) };
        let set = simulate_terminal(&model, &[100.0], 0.0, 1.0, None, &cfg).unwrap();
        let mom = log_moments(&set, 0);
        let want = 100f64.ln() + 0.05 - 0.01 - 0.5 * 0.0625;
        assert!((mom.mean - want).abs() < 3.0 * mom.mean_se);
    }

    #[test]
    fn piecewise_vol_log_variance() {
        let model = MarketModel::new(c(0.0), c(0.0), c(0.0), vec![halves(0.2, 0.3)], vec![]).unwrap();
        let cfg = MCConfig { steps_per_year: 2, ..MCConfig::new(100_000, 3) };
        let set = simulate_terminal(&model, &[1.0], 0.0, 1.0, None, &cfg).unwrap();
        let mom = log_moments(&set, 0);
        assert_eq!(set.steps, 2);
        assert!((mom.variance - 0.065).abs() < 3.0 * mom.variance_se, "{mom:?}");
    }

    #[test]
    fn unit_payoff_is_the_discount_factor() {
        let model = MarketModel::new(halves(0.02, 0.04), c(0.0), c(0.01), vec![c(0.2)], vec![]).unwrap();
        let res = price_mc_with(&model, &[100.0], 0.0, 1.0, None, |_| 1.0, &MCConfig::new(4000, 5)).unwrap();
        let disc = (-(0.03f64 + 0.01)).exp();
        assert!((res.price - disc).abs() < 1e-15);
        assert!(res.std_error < 1e-15);
        assert_eq!(res.knockout_fraction, 0.0);
    }

    #[test]
    fn discounted_asset_is_a_martingale() {
        let model = MarketModel::new(halves(0.02, 0.06), c(0.0), c(0.0), vec![halves(0.3, 0.2)], vec![]).unwrap();
        let cfg = MCConfig { steps_per_year: 2, ..MCConfig::new(200_000, 6) };
        let res = price_mc_with(&model, &[100.0], 0.0, 1.0, None, |y| y[0], &cfg).unwrap();
        assert!((res.price - 100.0).abs() < 3.0 * res.std_error, "{res:?}");
    }

    #[test]
    fn results_do_not_depend_on_worker_count() {
        let model = MarketModel::constant(0.03, 0.0, 0.0, &[0.2, 0.3], &[(0, 1, 0.4)], 1.0).unwrap();
        let domain = DomainSpec::new(vec![50.0, 50.0], vec![200.0, 200.0], Some(300.0)).unwrap();
        let cfg = MCConfig { antithetic: true, steps_per_year: 50, ..MCConfig::new(4000, 9) };
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
                price_mc_with(&model, &[100.0, 100.0], 0.0, 1.0, Some(&domain), |y| (200.0 - y[0] - y[1]).max(0.0), &cfg)
                    .unwrap()
            })
        };
        let a = run(1);
        let b = run(3);
        assert_eq!(a, b);
        assert!(a.knockout_fraction > 0.0 && a.knockout_fraction < 1.0);
        assert!(a.std_error > 0.0);
    }

    #[test]
    fn antithetic_does_not_increase_error_on_a_put() {
        let model = MarketModel::constant(0.03, 0.0, 0.0, &[0.25], &[], 1.0).unwrap();
        let put = |y: &[f64]| (100.0 - y[0]).max(0.0);
        let plain = MCConfig { steps_per_year: 1, ..MCConfig::new(100_000, 4) };
        let anti = MCConfig { antithetic: true, ..plain.clone() };
        let a = price_mc_with(&model, &[100.0], 0.0, 1.0, None, put, &plain).unwrap();
        let b = price_mc_with(&model, &[100.0], 0.0, 1.0, None, put, &anti).unwrap();
        assert!(b.std_error <= a.std_error);
    }

    #[test]
    fn validation_errors() {
        let model = MarketModel::constant(0.03, 0.0, 0.0, &[0.25], &[], 1.0).unwrap();
        let domain = DomainSpec::new(vec![50.0], vec![200.0], None).unwrap();
        let cfg = MCConfig::new(1000, 1);
        assert!(matches!(simulate_terminal(&model, &[300.0], 0.0, 1.0, Some(&domain), &cfg), Err(Error::Domain(_))));
        assert!(matches!(price_mc_with(&model, &[100.0], 0.0, 1.0, None, |_| 1.0, &MCConfig::new(10, 1)), Err(Error::Config(_))));
        let odd = MCConfig { antithetic: true, ..MCConfig::new(1001, 1) };
        assert!(odd.validate().is_err());
    }

    #[test]
    fn problem_front_end_and_dump() {
        let model = MarketModel::constant(0.03, 0.0, 0.0, &[0.25], &[], 1.0).unwrap();
        let problem = ProblemSpec {
            domain: DomainSpec::new(vec![50.0], vec![200.0], None).unwrap(),
            payoff: PayoffSpec::VanillaPut { strike: 100.0, asset: 0 },
            nodes: vec![11],
            tau0: 0.0,
            maturity: 1.0,
            barrier_free: false,
        };
        let cfg = MCConfig { steps_per_year: 12, ..MCConfig::new(2000, 8) };
        let res = price_mc(&model, &problem, &[100.0], &cfg).unwrap();
        assert!(res.knockout_fraction > 0.0);
        let set = simulate_terminal(&model, &[100.0], 0.0, 1.0, Some(&problem.domain), &cfg).unwrap();
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 2001);
    }
}
