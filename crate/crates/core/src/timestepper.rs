//! Theta-scheme time marching of `∂u/∂t + A(t) u = 0` on a masked grid.
//!
//! Engine time `t = T - τ` runs from 0 to `T - τ0`. The time partition always
//! contains every coefficient breakpoint, so a solve with piecewise-constant
//! coefficients is exactly a composition of constant-coefficient solves.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::coefficients::{
    averaged_operator_coeffs_with, check_uniform_ellipticity, MarketModel, VolAveraging,
    DEFAULT_ELLIPTICITY_SAMPLES,
};
use crate::discrete_operator::{assemble, DiscreteOperator, OperatorCoefficients};
use crate::domain_grid::{build_grid, evaluate_payoff, DomainSpec, Grid, MeasureRegion, PayoffSpec};
use crate::linalg::{self, CsrMatrix, SolveStats};
use crate::{Error, Result};

pub const DEFAULT_TOLERANCE: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 5000;
/// Knots closer than this (in years) are merged.
const KNOT_EPS: f64 = 1e-12;

/// Which partition times keep a full copy of the solution.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoreTimes {
    #[default]
    FinalOnly,
    EveryStep,
    /// Engine times; each is snapped to the nearest partition time.
    Times(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveConfig {
    pub theta: f64,
    pub dt_target: f64,
    pub tolerance: f64,
    pub max_iter: usize,
    /// Replace the first two steps by four implicit-Euler half-steps.
    pub rannacher: bool,
    pub store: StoreTimes,
}

impl SolveConfig {
    pub fn new(theta: f64, dt_target: f64) -> Result<Self> {
        let cfg = Self {
            theta,
            dt_target,
            tolerance: DEFAULT_TOLERANCE,
            max_iter: DEFAULT_MAX_ITER,
            rannacher: theta < 1.0,
            store: StoreTimes::FinalOnly,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_rannacher(mut self, on: bool) -> Self {
        self.rannacher = on;
        self
    }

    pub fn with_store(mut self, store: StoreTimes) -> Self {
        self.store = store;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.5..=1.0).contains(&self.theta) {
            return Err(Error::Config(format!("theta must lie in [0.5, 1], got {}", self.theta)));
        }
        if !(self.dt_target > 0.0 && self.dt_target.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt_target)));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("solver tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// Pricing problem in market time: value at `tau0` of a claim paying
/// `payoff` at `maturity`, knocked out on leaving `domain`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub domain: DomainSpec,
    pub payoff: PayoffSpec,
    pub nodes: Vec<usize>,
    pub tau0: f64,
    pub maturity: f64,
    /// The box is a truncation of an unbounded domain; norms use the core.
    pub barrier_free: bool,
}

impl ProblemSpec {
    pub fn horizon(&self) -> f64 {
        self.maturity - self.tau0
    }

    pub fn region(&self) -> MeasureRegion {
        if self.barrier_free {
            MeasureRegion::Core
        } else {
            MeasureRegion::Interior
        }
    }

    pub fn build_grid(&self) -> Result<Arc<Grid>> {
        Ok(Arc::new(build_grid(&self.domain, &self.nodes)?))
    }

    pub fn validate(&self, model: &MarketModel) -> Result<()> {
        if !(self.maturity > self.tau0) {
            return Err(Error::InvalidInterval { t0: self.tau0, t1: self.maturity });
        }
        let (a, b) = model.span();
        if self.tau0 < a || self.maturity > b {
            return Err(Error::OutOfRange { t: if self.tau0 < a { self.tau0 } else { self.maturity }, start: a, end: b });
        }
        if model.n() != self.domain.n() {
            return Err(Error::Shape { what: "domain dimension", expected: model.n(), got: self.domain.n() });
        }
        self.payoff.validate(model.n())
    }

    /// Market time of engine time `t`.
    pub fn market_time(&self, t: f64) -> f64 {
        self.maturity - t
    }
}

/// One step of the partition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub t0: f64,
    pub t1: f64,
    pub theta: f64,
}

impl Step {
    pub fn dt(&self) -> f64 {
        self.t1 - self.t0
    }
}

/// Engine-time partition of `[0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimePartition {
    steps: Vec<Step>,
}

impl TimePartition {
    /// Uniform subdivision of every interval between consecutive knots into
    /// steps no longer than `dt_target`.
    pub fn build(horizon: f64, knots: &[f64], cfg: &SolveConfig) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(Error::InvalidInterval { t0: 0.0, t1: horizon });
        }
        let mut ks: Vec<f64> = knots
            .iter()
            .copied()
            .filter(|&k| k > KNOT_EPS && k < horizon - KNOT_EPS)
            .collect();
        ks.push(0.0);
        ks.push(horizon);
        ks.sort_by(f64::total_cmp);
        ks.dedup_by(|a, b| (*a - *b).abs() <= KNOT_EPS);
        let mut times = vec![0.0];
        for w in ks.windows(2) {
            let (a, b) = (w[0], w[1]);
            let count = ((b - a) / cfg.dt_target - 1e-9).ceil().max(1.0) as usize;
            for k in 1..count {
                times.push(a + (b - a) * k as f64 / count as f64);
            }
            times.push(b);
        }
        let mut steps: Vec<Step> = times
            .windows(2)
            .map(|w| Step { t0: w[0], t1: w[1], theta: cfg.theta })
            .collect();
        if cfg.rannacher && cfg.theta < 1.0 {
            let head = steps.len().min(2);
            let mut start: Vec<Step> = Vec::with_capacity(steps.len() + head);
            for s in &steps[..head] {
                let mid = 0.5 * (s.t0 + s.t1);
                start.push(Step { t0: s.t0, t1: mid, theta: 1.0 });
                start.push(Step { t0: mid, t1: s.t1, theta: 1.0 });
            }
            start.extend_from_slice(&steps[head..]);
            steps = start;
        }
        Ok(Self { steps })
    }

    /// Partition for a model: knots at every coefficient breakpoint mapped
    /// to engine time, plus `extra` engine-time knots.
    pub fn for_model(model: &MarketModel, problem: &ProblemSpec, extra: &[f64], cfg: &SolveConfig) -> Result<Self> {
        let mut knots: Vec<f64> = model
            .breakpoints(problem.tau0, problem.maturity)
            .into_iter()
            .map(|tau| problem.market_time(tau))
            .collect();
        knots.extend_from_slice(extra);
        Self::build(problem.horizon(), &knots, cfg)
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn times(&self) -> Vec<f64> {
        let mut t = vec![0.0];
        t.extend(self.steps.iter().map(|s| s.t1));
        t
    }

    pub fn horizon(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.t1)
    }
}

/// Where each step's operator comes from.
#[derive(Debug, Clone)]
pub enum CoefficientSource<'a> {
    /// Instantaneous coefficients of a model, evaluated per step at
    /// `t0 + theta dt` inside the step's segment.
    TimeDependent { model: &'a MarketModel, maturity: f64 },
    /// One fixed set of coefficients.
    Constant(OperatorCoefficients),
}

impl CoefficientSource<'_> {
    fn coefficients(&self, step: &Step) -> Result<OperatorCoefficients> {
        match self {
            CoefficientSource::TimeDependent { model, maturity } => {
                let t_eval = step.t0 + step.theta * step.dt();
                let t_ref = 0.5 * (step.t0 + step.t1);
                OperatorCoefficients::from_market(&model.market_near(maturity - t_eval, maturity - t_ref))
            }
            CoefficientSource::Constant(c) => Ok(c.clone()),
        }
    }
}

/// Per-solve diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct SolveSummary {
    pub steps: usize,
    pub assemblies: usize,
    pub max_iterations: usize,
    pub max_residual: f64,
}

/// Solution snapshots plus the interior L2 norm after every step.
#[derive(Debug, Clone)]
pub struct SolutionField {
    pub grid: Arc<Grid>,
    /// Engine times of the stored snapshots.
    pub times: Vec<f64>,
    /// Full nodal vectors (Dirichlet nodes hold 0).
    pub values: Vec<Vec<f64>>,
    /// Every partition time, starting at 0.
    pub step_times: Vec<f64>,
    /// Interior L2 norm at every partition time.
    pub step_norms: Vec<f64>,
    pub summary: SolveSummary,
}

impl SolutionField {
    /// Solution at the final time.
    pub fn final_values(&self) -> &[f64] {
        self.values.last().expect("at least one snapshot")
    }

    /// Final solution at an asset point, by multilinear interpolation.
    pub fn price_at(&self, y: &[f64]) -> Result<f64> {
        let x = crate::domain_grid::log_transform(y)?;
        self.grid.interpolate(self.final_values(), &x)
    }

    /// CSV: engine time, market time, node coordinates, value.
    pub fn write_csv<W: std::io::Write>(&self, maturity: f64, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.grid.n();
        let mut header = vec!["t".to_string(), "tau".to_string()];
        header.extend((0..n).map(|i| format!("x{i}")));
        header.push("value".into());
        w.write_record(&header)?;
        for (t, vals) in self.times.iter().zip(&self.values) {
            for (f, v) in vals.iter().enumerate() {
                let mut rec = vec![format!("{t:.17e}"), format!("{:.17e}", maturity - t)];
                rec.extend(self.grid.node_coords(f).iter().map(|x| format!("{x:.17e}")));
                rec.push(format!("{v:.17e}"));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `(I + θ dt A) x = (I - (1-θ) dt A) u` with cached factors.
struct StepSystem {
    theta: f64,
    dt: f64,
    lhs: CsrMatrix,
    /// Tridiagonal bands for one-dimensional grids.
    bands: Option<(Vec<f64>, Vec<f64>, Vec<f64>)>,
}

impl StepSystem {
    fn new(op: &DiscreteOperator, dt: f64, theta: f64) -> Self {
        let lhs = op.matrix().shifted(1.0, theta * dt);
        let bands = (op.grid().n() == 1).then(|| {
            let m = lhs.nrows();
            let lower = (0..m).map(|i| if i > 0 { lhs.get(i, i - 1) } else { 0.0 }).collect();
            let diag = lhs.diagonal();
            let upper = (0..m).map(|i| if i + 1 < m { lhs.get(i, i + 1) } else { 0.0 }).collect();
            (lower, diag, upper)
        });
        Self { theta, dt, lhs, bands }
    }

    fn solve(&self, op: &DiscreteOperator, u: &[f64], tol: f64, max_iter: usize) -> Result<(Vec<f64>, SolveStats)> {
        let rhs: Vec<f64> = if self.theta < 1.0 {
            let au = op.matrix().mul(u);
            let w = (1.0 - self.theta) * self.dt;
            u.iter().zip(&au).map(|(x, y)| x - w * y).collect()
        } else {
            u.to_vec()
        };
        if let Some((lo, d, up)) = &self.bands {
            let x = linalg::solve_tridiagonal(lo, d, up, &rhs)?;
            let r = self.lhs.mul(&x);
            let bn = linalg::norm2(&rhs);
            let res = if bn > 0.0 {
                r.iter().zip(&rhs).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() / bn
            } else {
                0.0
            };
            return Ok((x, SolveStats { iterations: 1, relative_residual: res }));
        }
        let mut x = u.to_vec();
        let stats = linalg::bicgstab(&self.lhs, &rhs, &mut x, tol, max_iter)?;
        Ok((x, stats))
    }
}

/// One theta step on interior unknowns.
pub fn step_theta(u: &[f64], op: &DiscreteOperator, dt: f64, theta: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::InvalidInterval { t0: 0.0, t1: dt });
    }
    if !(0.5..=1.0).contains(&theta) {
        return Err(Error::Config(format!("theta must lie in [0.5, 1], got {theta}")));
    }
    if u.len() != op.dim() {
        return Err(Error::Shape { what: "interior vector", expected: op.dim(), got: u.len() });
    }
    let sys = StepSystem::new(op, dt, theta);
    Ok(sys.solve(op, u, DEFAULT_TOLERANCE, DEFAULT_MAX_ITER)?.0)
}

fn snap_indices(times: &[f64], store: &StoreTimes) -> Vec<bool> {
    let mut keep = vec![false; times.len()];
    *keep.last_mut().unwrap() = true;
    match store {
        StoreTimes::FinalOnly => {}
        StoreTimes::EveryStep => keep.iter_mut().for_each(|k| *k = true),
        StoreTimes::Times(ts) => {
            for &t in ts {
                let k = times
                    .iter()
                    .enumerate()
                    .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
                    .map(|(k, _)| k)
                    .unwrap();
                keep[k] = true;
            }
        }
    }
    keep
}

/// March `g` (full nodal vector) across `partition`.
pub fn solve_on_partition(
    grid: &Arc<Grid>,
    g: &[f64],
    source: &CoefficientSource<'_>,
    partition: &TimePartition,
    cfg: &SolveConfig,
) -> Result<SolutionField> {
    cfg.validate()?;
    if g.len() != grid.node_count() {
        return Err(Error::Shape { what: "initial condition", expected: grid.node_count(), got: g.len() });
    }
    let all_times = partition.times();
    let keep = snap_indices(&all_times, &cfg.store);
    let mut u = grid.gather(g);
    let mut times = Vec::new();
    let mut values = Vec::new();
    let norm = |u: &[f64]| (u.iter().map(|v| v * v).sum::<f64>() * grid.cell_volume()).sqrt();
    let mut step_norms = vec![norm(&u)];
    if keep[0] {
        times.push(0.0);
        values.push(grid.scatter(&u));
    }

    let mut summary = SolveSummary::default();
    let mut current: Option<(OperatorCoefficients, DiscreteOperator)> = None;
    let mut system: Option<StepSystem> = None;
    for (k, step) in partition.steps().iter().enumerate() {
        let coeffs = source.coefficients(step)?;
        let reuse_op = matches!(&current, Some((c, _)) if *c == coeffs);
        if !reuse_op {
            let op = assemble(&coeffs, grid)?;
            current = Some((coeffs, op));
            system = None;
            summary.assemblies += 1;
        }
        let op = &current.as_ref().unwrap().1;
        let dt = step.dt();
        let reuse_sys = matches!(&system, Some(s) if s.dt == dt && s.theta == step.theta);
        if !reuse_sys {
            system = Some(StepSystem::new(op, dt, step.theta));
        }
        let (next, stats) = system
            .as_ref()
            .unwrap()
            .solve(op, &u, cfg.tolerance, cfg.max_iter)?;
        summary.max_iterations = summary.max_iterations.max(stats.iterations);
        summary.max_residual = summary.max_residual.max(stats.relative_residual);
        u = next;
        step_norms.push(norm(&u));
        if keep[k + 1] {
            times.push(step.t1);
            values.push(grid.scatter(&u));
        }
    }
    summary.steps = partition.steps().len();
    Ok(SolutionField { grid: Arc::clone(grid), times, values, step_times: all_times, step_norms, summary })
}

/// Solve with the model's instantaneous coefficients.
pub fn solve_time_dependent(model: &MarketModel, problem: &ProblemSpec, cfg: &SolveConfig) -> Result<SolutionField> {
    let partition = prepare(model, problem, cfg)?;
    solve_time_dependent_on(model, problem, cfg, &partition)
}

pub fn solve_time_dependent_on(
    model: &MarketModel,
    problem: &ProblemSpec,
    cfg: &SolveConfig,
    partition: &TimePartition,
) -> Result<SolutionField> {
    let grid = problem.build_grid()?;
    let g = evaluate_payoff(&problem.payoff, &grid)?;
    let source = CoefficientSource::TimeDependent { model, maturity: problem.maturity };
    solve_on_partition(&grid, &g, &source, partition, cfg)
}

/// Solve with the time-averaged coefficients on the same partition as the
/// time-dependent solve.
pub fn solve_averaged(model: &MarketModel, problem: &ProblemSpec, cfg: &SolveConfig) -> Result<SolutionField> {
    solve_averaged_with(model, problem, cfg, VolAveraging::RootMeanSquare)
}

pub fn solve_averaged_with(
    model: &MarketModel,
    problem: &ProblemSpec,
    cfg: &SolveConfig,
    rule: VolAveraging,
) -> Result<SolutionField> {
    let partition = prepare(model, problem, cfg)?;
    solve_averaged_on(model, problem, cfg, rule, &partition)
}

pub fn solve_averaged_on(
    model: &MarketModel,
    problem: &ProblemSpec,
    cfg: &SolveConfig,
    rule: VolAveraging,
    partition: &TimePartition,
) -> Result<SolutionField> {
    let avg = averaged_operator_coeffs_with(model, problem.tau0, problem.maturity, rule)?;
    let coeffs = OperatorCoefficients::from_market(&avg.market_point())?;
    let grid = problem.build_grid()?;
    let g = evaluate_payoff(&problem.payoff, &grid)?;
    solve_on_partition(&grid, &g, &CoefficientSource::Constant(coeffs), partition, cfg)
}

fn prepare(model: &MarketModel, problem: &ProblemSpec, cfg: &SolveConfig) -> Result<TimePartition> {
    cfg.validate()?;
    problem.validate(model)?;
    check_uniform_ellipticity(model, problem.tau0, problem.maturity, DEFAULT_ELLIPTICITY_SAMPLES)?;
    TimePartition::for_model(model, problem, &[], cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::CoefficientSchedule;
    use crate::domain_grid::NodeClass;

    fn c(v: f64) -> CoefficientSchedule {
        CoefficientSchedule::constant(v, 0.0, 1.0).unwrap()
    }
    fn halves(a: f64, b: f64) -> CoefficientSchedule {
        CoefficientSchedule::piecewise_constant(&[0.0, 0.5, 1.0], &[a, b]).unwrap()
    }

    fn put_problem(nodes: usize) -> ProblemSpec {
        ProblemSpec {
            domain: DomainSpec::new(vec![50.0], vec![200.0], None).unwrap(),
            payoff: PayoffSpec::BasketPut { strike: 100.0 },
            nodes: vec![nodes],
            tau0: 0.0,
            maturity: 1.0,
            barrier_free: false,
        }
    }

    fn diffusion_op(nodes: usize, a: f64, b: f64, q: f64) -> DiscreteOperator {
        let d = DomainSpec::new(vec![1.0], vec![std::f64::consts::PI.exp()], None).unwrap();
        let g = Arc::new(build_grid(&d, &[nodes]).unwrap());
        let c = OperatorCoefficients::new(nalgebra::DMatrix::from_element(1, 1, a), vec![b], q).unwrap();
        assemble(&c, &g).unwrap()
    }

    #[test]
    fn zero_operator_is_identity() {
        let op = diffusion_op(11, 0.5, 0.0, 0.0);
        let zero = DiscreteOperator::from_matrix(
            CsrMatrix::from_rows(op.dim(), vec![vec![]; op.dim()]),
            op.grid(),
        )
        .unwrap();
        let u: Vec<f64> = (0..op.dim()).map(|i| (i as f64).sin()).collect();
        assert_eq!(step_theta(&u, &zero, 0.1, 0.5).unwrap(), u);
    }

    #[test]
    fn one_step_matches_pade_on_sine_mode() {
        let nodes = 65;
        let op = diffusion_op(nodes, 0.5, 0.0, 0.0);
        let m = (nodes - 1) as f64;
        let h = op.grid().spacing()[0];
        let u: Vec<f64> = (1..nodes - 1).map(|k| (std::f64::consts::PI * k as f64 / m).sin()).collect();
        // eigenvalue of the discrete stencil on the fundamental mode
        let lam = (1.0 - (std::f64::consts::PI / m).cos()) / (h * h);
        let dt = 0.3;
        let factor = (1.0 - 0.5 * dt * lam) / (1.0 + 0.5 * dt * lam);
        let next = step_theta(&u, &op, dt, 0.5).unwrap();
        for (a, b) in next.iter().zip(&u) {
            assert!((a - factor * b).abs() < 1e-10);
        }
    }

    #[test]
    fn implicit_euler_contracts_with_huge_step() {
        let op = diffusion_op(33, 0.1, 0.05, 0.02);
        let u = linalg::seeded_normal_vector(op.dim(), 3);
        let next = step_theta(&u, &op, 1e6, 1.0).unwrap();
        assert!(linalg::norm2(&next) < linalg::norm2(&u));
        assert!(linalg::norm2(&next) < 1e-3 * linalg::norm2(&u));
    }

    #[test]
    fn partition_hits_breakpoints() {
        let cfg = SolveConfig::new(0.5, 0.1).unwrap().with_rannacher(false);
        let p = TimePartition::build(1.0, &[0.25, 0.55], &cfg).unwrap();
        let t = p.times();
        assert!(t.contains(&0.25) && t.contains(&0.55));
        assert!(p.steps().iter().all(|s| s.dt() <= 0.1 + 1e-12));
        let cfg = cfg.with_rannacher(true);
        let p = TimePartition::build(1.0, &[], &cfg).unwrap();
        assert_eq!(p.steps().len(), 12);
        assert!(p.steps()[..4].iter().all(|s| s.theta == 1.0 && (s.dt() - 0.05).abs() < 1e-15));
        assert!(p.steps()[4..].iter().all(|s| s.theta == 0.5));
    }

    #[test]
    fn constant_model_is_bit_identical_to_averaged() {
        let model = MarketModel::constant(0.03, 0.01, 0.005, &[0.25], &[], 1.0).unwrap();
        let cfg = SolveConfig::new(0.5, 1.0 / 64.0).unwrap();
        let a = solve_time_dependent(&model, &put_problem(81), &cfg).unwrap();
        let b = solve_averaged(&model, &put_problem(81), &cfg).unwrap();
        assert_eq!(a.final_values(), b.final_values());
        assert_eq!(a.summary.assemblies, 1);
    }

    #[test]
    fn two_dimensional_constant_model_is_bit_identical() {
        let model = MarketModel::constant(0.03, 0.0, 0.0, &[0.2, 0.3], &[(0, 1, 0.4)], 1.0).unwrap();
        let problem = ProblemSpec {
            domain: DomainSpec::new(vec![50.0, 50.0], vec![200.0, 200.0], Some(300.0)).unwrap(),
            payoff: PayoffSpec::BasketPut { strike: 200.0 },
            nodes: vec![21, 21],
            tau0: 0.0,
            maturity: 1.0,
            barrier_free: false,
        };
        let cfg = SolveConfig::new(0.5, 1.0 / 32.0).unwrap();
        let a = solve_time_dependent(&model, &problem, &cfg).unwrap();
        let b = solve_averaged(&model, &problem, &cfg).unwrap();
        assert_eq!(a.final_values(), b.final_values());
        for (f, class) in a.grid.classes().iter().enumerate() {
            if *class == NodeClass::Dirichlet {
                assert_eq!(a.final_values()[f], 0.0);
            }
        }
    }

    #[test]
    fn piecewise_solve_is_composition_of_constant_solves() {
        let model = MarketModel::new(c(0.02), c(0.0), c(0.0), vec![halves(0.2, 0.3)], vec![]).unwrap();
        let problem = put_problem(61);
        let cfg = SolveConfig::new(0.5, 1.0 / 32.0).unwrap().with_rannacher(false);
        let full = solve_time_dependent(&model, &problem, &cfg).unwrap();

        // engine time [0, 0.5] uses market [0.5, 1] where sigma = 0.3, then 0.2
        let grid = problem.build_grid().unwrap();
        let g = evaluate_payoff(&problem.payoff, &grid).unwrap();
        let first = MarketModel::constant(0.02, 0.0, 0.0, &[0.3], &[], 1.0).unwrap();
        let second = MarketModel::constant(0.02, 0.0, 0.0, &[0.2], &[], 1.0).unwrap();
        let coeff = |m: &MarketModel| {
            OperatorCoefficients::from_market(&m.market_at(0.5).unwrap()).unwrap()
        };
        let half = TimePartition::build(0.5, &[], &cfg).unwrap();
        let mid = solve_on_partition(&grid, &g, &CoefficientSource::Constant(coeff(&first)), &half, &cfg).unwrap();
        let end = solve_on_partition(&grid, mid.final_values(), &CoefficientSource::Constant(coeff(&second)), &half, &cfg).unwrap();
        for (a, b) in full.final_values().iter().zip(end.final_values()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn averaged_solve_ignores_time_order() {
        let model = MarketModel::new(halves(0.02, 0.04), c(0.0), c(0.0), vec![halves(0.2, 0.3)], vec![]).unwrap();
        let rev = model.time_reversed().unwrap();
        let cfg = SolveConfig::new(0.5, 1.0 / 32.0).unwrap();
        let a = solve_averaged(&model, &put_problem(41), &cfg).unwrap();
        let b = solve_averaged(&rev, &put_problem(41), &cfg).unwrap();
        assert_eq!(a.final_values(), b.final_values());
    }

    #[test]
    fn symmetric_case_contracts_every_step() {
        // b = 0 needs sigma^2 / 2 = r - m
        let model = MarketModel::constant(0.02, 0.0, 0.1, &[0.2], &[], 1.0).unwrap();
        let cfg = SolveConfig::new(0.5, 1.0 / 64.0).unwrap();
        let sol = solve_time_dependent(&model, &put_problem(81), &cfg).unwrap();
        for w in sol.step_norms.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn second_order_in_time() {
        let grid = {
            let d = DomainSpec::new(vec![1.0], vec![std::f64::consts::PI.exp()], None).unwrap();
            Arc::new(build_grid(&d, &[101]).unwrap())
        };
        let g: Vec<f64> = (0..grid.node_count())
            .map(|f| {
                let x = grid.node_coords(f)[0];
                x.sin() + 0.3 * (3.0 * x).sin()
            })
            .collect();
        let coeffs = OperatorCoefficients::new(nalgebra::DMatrix::from_element(1, 1, 0.08), vec![0.02], 0.03).unwrap();
        let src = CoefficientSource::Constant(coeffs);
        let run = |dt: f64| {
            let cfg = SolveConfig::new(0.5, dt).unwrap().with_rannacher(false);
            let p = TimePartition::build(1.0, &[], &cfg).unwrap();
            solve_on_partition(&grid, &g, &src, &p, &cfg).unwrap().final_values().to_vec()
        };
        let mut errs = Vec::new();
        for dt in [0.1, 0.05] {
            let coarse = run(dt);
            let fine = run(dt / 4.0);
            errs.push(linalg::norm2(&coarse.iter().zip(&fine).map(|(a, b)| a - b).collect::<Vec<_>>()));
        }
        let slope = (errs[0] / errs[1]).log2();
        assert!((slope - 2.0).abs() < 0.2, "slope {slope}");
    }

    #[test]
    fn store_every_step_and_selected_times() {
        let model = MarketModel::constant(0.02, 0.0, 0.0, &[0.2], &[], 1.0).unwrap();
        let cfg = SolveConfig::new(1.0, 0.25).unwrap().with_store(StoreTimes::EveryStep);
        let sol = solve_time_dependent(&model, &put_problem(21), &cfg).unwrap();
        assert_eq!(sol.times, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let cfg = cfg.with_store(StoreTimes::Times(vec![0.49]));
        let sol = solve_time_dependent(&model, &put_problem(21), &cfg).unwrap();
        assert_eq!(sol.times, vec![0.5, 1.0]);
        let mut buf = Vec::new();
        sol.write_csv(1.0, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 2 * 21);
    }

    #[test]
    fn config_validation() {
        assert!(SolveConfig::new(0.4, 0.1).is_err());
        assert!(SolveConfig::new(0.5, 0.0).is_err());
        let model = MarketModel::constant(0.02, 0.0, 0.0, &[0.2], &[], 1.0).unwrap();
        let mut p = put_problem(21);
        p.maturity = 2.0;
        let cfg = SolveConfig::new(0.5, 0.1).unwrap();
        assert!(matches!(solve_time_dependent(&model, &p, &cfg), Err(Error::OutOfRange { .. })));
    }
}
