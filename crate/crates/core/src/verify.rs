//! Refinement and agreement experiments, each producing a
//! [`VerificationReport`].

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analytic_oracles::{bs_averaged, fourier_solve, FourierGrid, MultiplierRoute, OptionKind};
use crate::coefficients::{check_uniform_ellipticity, CoefficientSchedule, MarketModel, Segment, Profile, VolAveraging, DEFAULT_ELLIPTICITY_SAMPLES};
use crate::discrete_operator::{assemble, OperatorCoefficients};
use crate::domain_grid::{evaluate_payoff, PayoffSpec};
use crate::mc_oracle::{price_mc, MCConfig, MCResult};
use crate::semigroup_lab::{
    commuting_family, compose_piecewise, noncommuting_witness, spectral_norm, verify_exp_identity, yosida,
    yosida_flow_convergence, yosida_probe_ratio, yosida_rate_slope, CommutingPair, MonotoneMatrix, YosidaTable,
};
use crate::timestepper::{
    solve_averaged_on, solve_on_partition, solve_time_dependent_on, CoefficientSource, ProblemSpec,
    SolutionField, SolveConfig, StoreTimes, TimePartition,
};
use crate::{Error, Result};

/// Residuals at or below this count as exact zeros when checking monotone
/// decrease.
pub const ZERO_FLOOR: f64 = 1e-14;
/// Slack on the bounded-growth exponent.
pub const ENERGY_SLACK: f64 = 0.1;

/// One row of a report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelRecord {
    pub label: String,
    pub nodes: Vec<usize>,
    pub dt: f64,
    pub measured: f64,
    /// Bound or tolerance the measurement is compared with (`inf` when the
    /// row has none).
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub experiment: String,
    pub records: Vec<LevelRecord>,
    pub pass: bool,
    /// Free-form lines for the text summary.
    pub notes: Vec<String>,
    /// Seconds; kept out of the deterministic outputs.
    #[serde(skip)]
    pub wall_clock: f64,
}

impl VerificationReport {
    fn new(experiment: &str) -> Self {
        Self { experiment: experiment.into(), records: Vec::new(), pass: false, notes: Vec::new(), wall_clock: 0.0 }
    }

    fn finish(mut self, start: Instant) -> Self {
        self.pass = !self.records.is_empty() && self.records.iter().all(|r| r.pass);
        self.wall_clock = start.elapsed().as_secs_f64();
        self
    }

    pub fn verdict(&self) -> &'static str {
        if self.pass {
            "pass"
        } else {
            "fail"
        }
    }

    pub fn measured(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.measured).collect()
    }

    /// Human-readable summary without timing information.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "experiment: {}", self.experiment).unwrap();
        writeln!(s, "verdict: {}", self.verdict()).unwrap();
        for r in &self.records {
            writeln!(
                s,
                "  {:<28} nodes={:<10} dt={:<12} measured={:<12.6e} bound={:<12.6e} {}",
                r.label,
                nodes_label(&r.nodes),
                fmt_dt(r.dt),
                r.measured,
                r.bound,
                if r.pass { "ok" } else { "FAIL" }
            )
            .unwrap();
        }
        for n in &self.notes {
            writeln!(s, "  {n}").unwrap();
        }
        s
    }

    /// Columns: experiment, label, nodes, dt, measured, bound, pass.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["experiment", "label", "nodes", "dt", "measured", "bound", "pass"])?;
        for r in &self.records {
            w.write_record([
                self.experiment.clone(),
                r.label.clone(),
                nodes_label(&r.nodes),
                fmt_dt(r.dt),
                format!("{:.17e}", r.measured),
                format!("{:.17e}", r.bound),
                r.pass.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn nodes_label(nodes: &[usize]) -> String {
    if nodes.is_empty() {
        return "-".into();
    }
    nodes.iter().map(|n| n.to_string()).collect::<Vec<_>>().join("x")
}

fn fmt_dt(dt: f64) -> String {
    if dt.is_nan() {
        "-".into()
    } else {
        format!("{dt:.17e}")
    }
}

/// Grid and time step of one refinement level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Level {
    pub nodes: Vec<usize>,
    pub dt: f64,
}

/// `levels` each halve the mesh width and the time step of the previous one.
fn check_levels(levels: &[Level], n: usize) -> Result<()> {
    if levels.len() < 3 {
        return Err(Error::Config(format!("refinement needs at least 3 levels, got {}", levels.len())));
    }
    for (k, l) in levels.iter().enumerate() {
        if l.nodes.len() != n {
            return Err(Error::Shape { what: "level nodes", expected: n, got: l.nodes.len() });
        }
        if k > 0 {
            let p = &levels[k - 1];
            let halves_h = l.nodes.iter().zip(&p.nodes).all(|(a, b)| a - 1 == 2 * (b - 1));
            let halves_dt = (l.dt * 2.0 - p.dt).abs() <= 1e-12 * p.dt;
            if !halves_h || !halves_dt {
                return Err(Error::Config(format!("level {k} does not halve h and dt of level {}", k - 1)));
            }
        }
    }
    Ok(())
}

fn relative_l2(sol: &SolutionField, a: &[f64], b: &[f64], problem: &ProblemSpec) -> f64 {
    let region = problem.region();
    let den = sol.grid.l2_norm(a, region);
    let num = sol.grid.l2_distance(a, b, region);
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Time-dependent against averaged solves on identical partitions, for each
/// level; pass iff the relative residual decreases and the finest is within
/// `tolerance`.
pub fn theorem2_check(
    model: &MarketModel,
    problem: &ProblemSpec,
    levels: &[Level],
    scheme: &SolveConfig,
    rule: VolAveraging,
    tolerance: f64,
) -> Result<VerificationReport> {
    let start = Instant::now();
    check_levels(levels, model.n())?;
    problem.validate(model)?;
    check_uniform_ellipticity(model, problem.tau0, problem.maturity, DEFAULT_ELLIPTICITY_SAMPLES)?;
    let mut report = VerificationReport::new("verify-theorem2");
    let mut prev = f64::INFINITY;
    let mut residuals = Vec::new();
    for (k, level) in levels.iter().enumerate() {
        let p = ProblemSpec { nodes: level.nodes.clone(), ..problem.clone() };
        let cfg = SolveConfig { dt_target: level.dt, store: StoreTimes::FinalOnly, ..scheme.clone() };
        let ctx = |e: Error| Error::Config(format!("level {k}: {e}"));
        let part = TimePartition::for_model(model, &p, &[], &cfg).map_err(ctx)?;
        let u = solve_time_dependent_on(model, &p, &cfg, &part).map_err(ctx)?;
        let ubar = solve_averaged_on(model, &p, &cfg, rule, &part).map_err(ctx)?;
        let r = relative_l2(&u, u.final_values(), ubar.final_values(), &p);
        let last = k + 1 == levels.len();
        let decreasing = r < prev || r <= ZERO_FLOOR;
        let bound = if last { prev.min(tolerance) } else { prev };
        report.records.push(LevelRecord {
            label: format!("level {k}"),
            nodes: level.nodes.clone(),
            dt: level.dt,
            measured: r,
            bound,
            pass: decreasing && (!last || r <= tolerance),
        });
        residuals.push(r);
        prev = r;
    }
    report.notes.push(format!("volatility average: {rule:?}; tolerance {tolerance:e}"));
    if let Some(s) = refinement_slope(&residuals) {
        report.notes.push(format!("observed order (last two levels): {s:.3}"));
    }
    Ok(report.finish(start))
}

/// `log2(r_{k-1} / r_k)` over the last two levels, when both are nonzero.
pub fn refinement_slope(residuals: &[f64]) -> Option<f64> {
    let n = residuals.len();
    if n < 2 || residuals[n - 1] <= 0.0 || residuals[n - 2] <= 0.0 {
        return None;
    }
    Some((residuals[n - 2] / residuals[n - 1]).log2())
}

/// Piecewise-constant approximation of `s` on market times `[tau0, maturity]`:
/// on engine step `[t_k, t_{k+1})` with `t_k = k H / N` it takes the value at
/// `t_k`, read from inside the step.
pub fn sample_left(s: &CoefficientSchedule, tau0: f64, maturity: f64, pieces: usize) -> Result<CoefficientSchedule> {
    let h = maturity - tau0;
    let engine = |k: usize| if k == pieces { h } else { h * k as f64 / pieces as f64 };
    let mut segments: Vec<Segment> = (0..pieces)
        .map(|k| {
            let (t0, t1) = (engine(k), engine(k + 1));
            let value = s.eval_near(maturity - t0, maturity - 0.5 * (t0 + t1));
            Segment { t_start: maturity - t1, t_end: maturity - t0, profile: Profile::Constant(value) }
        })
        .collect();
    segments.reverse();
    segments[0].t_start = tau0;
    segments.last_mut().unwrap().t_end = maturity;
    CoefficientSchedule::new(segments)
}

/// The model with every schedule replaced by [`sample_left`].
pub fn piecewise_constant_model(model: &MarketModel, tau0: f64, maturity: f64, pieces: usize) -> Result<MarketModel> {
    model.derive(|s| sample_left(s, tau0, maturity, pieces))
}

/// Sup over partition times of the L2 distance between the solution and its
/// piecewise-constant-coefficient approximations; pass iff it decreases in N.
pub fn lemma5_check(
    model: &MarketModel,
    problem: &ProblemSpec,
    n_list: &[usize],
    scheme: &SolveConfig,
) -> Result<VerificationReport> {
    let start = Instant::now();
    if n_list.is_empty() || n_list.windows(2).any(|w| w[1] <= w[0]) || n_list[0] == 0 {
        return Err(Error::Config("N list must be positive and increasing".into()));
    }
    problem.validate(model)?;
    check_uniform_ellipticity(model, problem.tau0, problem.maturity, DEFAULT_ELLIPTICITY_SAMPLES)?;
    let h = problem.horizon();
    let mut knots: Vec<f64> = Vec::new();
    for &n in n_list {
        knots.extend((1..n).map(|k| h * k as f64 / n as f64));
    }
    let cfg = SolveConfig { store: StoreTimes::EveryStep, ..scheme.clone() };
    let part = TimePartition::for_model(model, problem, &knots, &cfg)?;
    let grid = problem.build_grid()?;
    let g = evaluate_payoff(&problem.payoff, &grid)?;
    let solve = |m: &MarketModel| {
        solve_on_partition(&grid, &g, &CoefficientSource::TimeDependent { model: m, maturity: problem.maturity }, &part, &cfg)
    };
    let v = solve(model)?;
    let region = problem.region();
    let mut report = VerificationReport::new("verify-lemma5");
    let mut prev = f64::INFINITY;
    let mut errors = Vec::new();
    for &n in n_list {
        let approx = piecewise_constant_model(model, problem.tau0, problem.maturity, n)?;
        let vn = solve(&approx)?;
        let err = v
            .values
            .iter()
            .zip(&vn.values)
            .map(|(a, b)| grid.l2_distance(a, b, region))
            .fold(0.0, f64::max);
        let pass = err < prev || err <= ZERO_FLOOR;
        report.records.push(LevelRecord {
            label: format!("N={n}"),
            nodes: problem.nodes.clone(),
            dt: scheme.dt_target,
            measured: err,
            bound: prev,
            pass,
        });
        errors.push(err);
        prev = err;
    }
    let ratios: Vec<String> = errors
        .windows(2)
        .map(|w| if w[0] > 0.0 { format!("{:.3}", w[1] / w[0]) } else { "-".into() })
        .collect();
    report.notes.push(format!("error ratios between consecutive N: [{}]", ratios.join(", ")));
    Ok(report.finish(start))
}

/// Per-step norm checks: bounded growth `‖u(t)‖ <= e^{1.1 c1 t} ‖g‖` and, when
/// every operator has `b = 0` and `q >= 0`, strict decrease.
pub fn energy_check(model: &MarketModel, problem: &ProblemSpec, scheme: &SolveConfig) -> Result<VerificationReport> {
    problem.validate(model)?;
    check_uniform_ellipticity(model, problem.tau0, problem.maturity, DEFAULT_ELLIPTICITY_SAMPLES)?;
    let cfg = SolveConfig { store: StoreTimes::FinalOnly, ..scheme.clone() };
    let part = TimePartition::for_model(model, problem, &[], &cfg)?;
    let sol = solve_time_dependent_on(model, problem, &cfg, &part)?;
    energy_from_solution(model, problem, &sol, &part)
}

/// Energy checks on a finished solve.
pub fn energy_from_solution(
    model: &MarketModel,
    problem: &ProblemSpec,
    sol: &SolutionField,
    part: &TimePartition,
) -> Result<VerificationReport> {
    let start = Instant::now();
    // sample the coefficients at both ends and the middle of every piece
    let mut knots = vec![problem.tau0];
    knots.extend(model.breakpoints(problem.tau0, problem.maturity));
    knots.push(problem.maturity);
    let mut c1: f64 = 0.0;
    let mut symmetric = true;
    let mut seen: Vec<OperatorCoefficients> = Vec::new();
    for w in knots.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        for t in [w[0], mid, w[1]] {
            let coeffs = OperatorCoefficients::from_market(&model.market_near(t, mid))?;
            if seen.contains(&coeffs) {
                continue;
            }
            symmetric &= coeffs.b().iter().all(|b| b.abs() <= 1e-14) && coeffs.q() >= 0.0;
            c1 = c1.max(assemble(&coeffs, &sol.grid)?.monotonicity_shift());
            seen.push(coeffs);
        }
    }
    let mut report = VerificationReport::new("energy");
    let g_norm = sol.step_norms[0];
    for (k, (&t, &norm)) in sol.step_times.iter().zip(&sol.step_norms).enumerate().skip(1) {
        let bound = (c1 * t * (1.0 + ENERGY_SLACK)).exp() * g_norm;
        let mut pass = norm <= bound * (1.0 + 1e-12);
        let mut b = bound;
        if symmetric {
            let prev = sol.step_norms[k - 1];
            pass &= norm < prev || (norm == 0.0 && prev == 0.0);
            b = b.min(prev);
        }
        report.records.push(LevelRecord {
            label: format!("t={t:.6}"),
            nodes: problem.nodes.clone(),
            dt: part.steps()[k - 1].dt(),
            measured: norm,
            bound: b,
            pass,
        });
    }
    report.notes.push(format!("c1 = {c1:.6e}; symmetric case: {symmetric}; |g| = {g_norm:.6e}"));
    Ok(report.finish(start))
}

/// Which oracles to compare against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleOptions {
    #[serde(default)]
    pub closed_form: bool,
    #[serde(default)]
    pub fourier: bool,
    #[serde(default)]
    pub mc: Option<MCConfig>,
    /// Asset point for the Monte Carlo comparison.
    #[serde(default)]
    pub spot: Vec<f64>,
    #[serde(default = "default_rel_tol")]
    pub relative_tolerance: f64,
    /// Relative allowance for discrete-monitoring bias with barriers.
    #[serde(default = "default_barrier_tol")]
    pub barrier_tolerance: f64,
}

fn default_rel_tol() -> f64 {
    1e-3
}
fn default_barrier_tol() -> f64 {
    0.02
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            closed_form: false,
            fourier: false,
            mc: None,
            spot: Vec::new(),
            relative_tolerance: default_rel_tol(),
            barrier_tolerance: default_barrier_tol(),
        }
    }
}

fn closed_form_kind(payoff: &PayoffSpec) -> Option<(OptionKind, f64)> {
    match *payoff {
        PayoffSpec::BasketPut { strike } | PayoffSpec::Gmmb { strike } | PayoffSpec::VanillaPut { strike, .. } => {
            Some((OptionKind::Put, strike))
        }
        PayoffSpec::BasketCall { strike } => Some((OptionKind::Call, strike)),
        PayoffSpec::Custom { .. } => None,
    }
}

/// PDE against closed form, Fourier and Monte Carlo, as enabled.
pub fn oracle_agreement(
    model: &MarketModel,
    problem: &ProblemSpec,
    scheme: &SolveConfig,
    opts: &OracleOptions,
) -> Result<(VerificationReport, Option<MCResult>)> {
    let start = Instant::now();
    problem.validate(model)?;
    check_uniform_ellipticity(model, problem.tau0, problem.maturity, DEFAULT_ELLIPTICITY_SAMPLES)?;
    let cfg = SolveConfig { store: StoreTimes::FinalOnly, ..scheme.clone() };
    let part = TimePartition::for_model(model, problem, &[], &cfg)?;
    let sol = solve_time_dependent_on(model, problem, &cfg, &part)?;
    let grid = &sol.grid;
    let u = sol.final_values();
    let region = problem.region();
    let mut report = VerificationReport::new("oracle-agreement");

    if opts.closed_form {
        if model.n() != 1 || !problem.barrier_free {
            return Err(Error::Config("closed-form comparison needs one asset and a barrier-free problem".into()));
        }
        let (kind, strike) = closed_form_kind(&problem.payoff)
            .ok_or_else(|| Error::Config("closed-form comparison needs a put or call payoff".into()))?;
        let mut reference = vec![0.0; grid.node_count()];
        for &f in grid.interior_nodes() {
            let spot = grid.node_coords(f)[0].exp();
            reference[f] = bs_averaged(model, spot, strike, problem.tau0, problem.maturity, kind)?;
        }
        let rel = grid.l2_distance(u, &reference, region) / grid.l2_norm(&reference, region);
        report.records.push(LevelRecord {
            label: "closed-form".into(),
            nodes: problem.nodes.clone(),
            dt: scheme.dt_target,
            measured: rel,
            bound: opts.relative_tolerance,
            pass: rel <= opts.relative_tolerance,
        });
    }

    if opts.fourier {
        if model.n() > 2 || !problem.barrier_free {
            return Err(Error::Config("Fourier comparison needs n <= 2 and a barrier-free problem".into()));
        }
        let fgrid = FourierGrid::matching(grid.lower_log().to_vec(), grid.upper_log().to_vec(), &problem.nodes)?;
        let payoff = &problem.payoff;
        let g = fgrid.sample(|x| {
            let y: Vec<f64> = x.iter().map(|v| v.exp()).collect();
            payoff.at(&y).unwrap_or(0.0)
        });
        let field = fourier_solve(model, &fgrid, &g, problem.tau0, problem.maturity, MultiplierRoute::TimeDependent)?;
        // periodic node k sits on finite-difference node k
        let mut reference = vec![0.0; grid.node_count()];
        for f in 0..grid.node_count() {
            let idx = grid.multi_index(f);
            if idx.iter().zip(fgrid.dims()).all(|(&k, &d)| k < d) {
                let mut flat = 0;
                let mut stride = 1;
                for (k, d) in idx.iter().zip(fgrid.dims()) {
                    flat += k * stride;
                    stride *= d;
                }
                reference[f] = field.values[flat];
            }
        }
        let rel = grid.l2_distance(u, &reference, region) / grid.l2_norm(&reference, region);
        report.records.push(LevelRecord {
            label: "fourier".into(),
            nodes: problem.nodes.clone(),
            dt: scheme.dt_target,
            measured: rel,
            bound: opts.relative_tolerance,
            pass: rel <= opts.relative_tolerance,
        });
        report.notes.push(format!(
            "fourier: wrap mass {:.3e}, imaginary residue {:.3e}",
            field.wrap_mass, field.imag_residue
        ));
    }

    let mut mc_result = None;
    if let Some(mc) = &opts.mc {
        if opts.spot.len() != model.n() {
            return Err(Error::Shape { what: "Monte Carlo spot", expected: model.n(), got: opts.spot.len() });
        }
        let pde = sol.price_at(&opts.spot)?;
        let res = price_mc(model, problem, &opts.spot, mc)?;
        let diff = (pde - res.price).abs();
        let bound = if problem.barrier_free {
            3.0 * res.std_error
        } else {
            (3.0 * res.std_error).max(opts.barrier_tolerance * pde.abs())
        };
        report.records.push(LevelRecord {
            label: "monte-carlo".into(),
            nodes: problem.nodes.clone(),
            dt: scheme.dt_target,
            measured: diff,
            bound,
            pass: diff <= bound,
        });
        report.notes.push(format!(
            "monte-carlo: pde {pde:.6} mc {:.6} stderr {:.3e} knocked {:.4} paths {}",
            res.price, res.std_error, res.knockout_fraction, res.paths
        ));
        mc_result = Some(res);
    }
    if report.records.is_empty() {
        return Err(Error::Config("oracle agreement has no comparison enabled".into()));
    }
    Ok((report.finish(start), mc_result))
}

/// Parameters of the matrix-scale semigroup suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemigroupOptions {
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Random commuting pairs tried for the exponential identity.
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    /// Stand-in for the `λ -> 0` limit in the rate fit.
    #[serde(default = "default_reference_lambda")]
    pub reference_lambda: f64,
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default = "default_segments")]
    pub segments: usize,
    /// Bound on the identity and composition residuals.
    #[serde(default = "default_identity_tol")]
    pub tolerance: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_dim() -> usize {
    crate::semigroup_lab::DEFAULT_DIM
}
fn default_seeds() -> usize {
    100
}
fn default_lambdas() -> Vec<f64> {
    vec![1e-1, 1e-2, 1e-3]
}
fn default_reference_lambda() -> f64 {
    1e-5
}
fn default_probes() -> usize {
    16
}
fn default_segments() -> usize {
    5
}
fn default_identity_tol() -> f64 {
    1e-10
}

impl Default for SemigroupOptions {
    fn default() -> Self {
        Self {
            dim: default_dim(),
            seeds: default_seeds(),
            lambdas: default_lambdas(),
            reference_lambda: default_reference_lambda(),
            probes: default_probes(),
            segments: default_segments(),
            tolerance: default_identity_tol(),
            seed: 0,
        }
    }
}

/// Witness residual the non-commuting pair must exceed.
pub const WITNESS_FLOOR: f64 = 1e-3;
/// Expected Yosida rate on rough data and its allowed deviation.
pub const HALF_ORDER: (f64, f64) = (0.5, 0.15);

fn record(label: String, measured: f64, bound: f64, pass: bool) -> LevelRecord {
    LevelRecord { label, nodes: Vec::new(), dt: f64::NAN, measured, bound, pass }
}

/// Exponential identity, resolvent and Yosida bounds, flow convergence and
/// piecewise composition on dense matrices. Returns the flow table of the
/// rotational pair.
pub fn semigroup_suite(opts: &SemigroupOptions) -> Result<(VerificationReport, YosidaTable)> {
    let start = Instant::now();
    if opts.dim < 2 || opts.seeds == 0 || opts.segments == 0 || opts.probes == 0 {
        return Err(Error::Config("semigroup suite needs dim >= 2 and positive seeds, segments and probes".into()));
    }
    if opts.lambdas.len() < 2 || opts.lambdas.iter().chain([&opts.reference_lambda]).any(|l| !(*l > 0.0)) {
        return Err(Error::Config("semigroup suite needs at least two positive lambdas".into()));
    }
    let mut report = VerificationReport::new("semigroup");
    let k = opts.dim;

    let worst = (0..opts.seeds as u64)
        .map(|i| verify_exp_identity(&CommutingPair::random_symmetric(k, opts.seed.wrapping_add(i))))
        .fold(0.0, f64::max);
    report.records.push(record(format!("exp identity ({} pairs)", opts.seeds), worst, opts.tolerance, worst <= opts.tolerance));
    let (_, _, w) = noncommuting_witness();
    report.records.push(record("non-commuting witness (floor)".into(), w, WITNESS_FLOOR, w > WITNESS_FLOOR));

    let sym = MonotoneMatrix::random_symmetric(k, opts.seed);
    let rot = CommutingPair::rotational(k / 2, 1e4, opts.seed);
    for (name, a) in [("symmetric", sym.matrix()), ("rotational", rot.a1())] {
        for &lambda in &opts.lambdas {
            let (j, al) = yosida(a, lambda)?;
            let jn = spectral_norm(&j);
            report.records.push(record(format!("|J| {name} l={lambda:e}"), jn, 1.0, jn <= 1.0 + 1e-12));
            let pr = yosida_probe_ratio(a, &al, opts.probes, opts.seed);
            report.records.push(record(format!("|A_l v|/|Av| {name} l={lambda:e}"), pr, 1.0, pr <= 1.0 + 1e-12));
        }
    }

    let u0 = rot.rough_vector();
    let table = yosida_flow_convergence(&rot, &u0, &opts.lambdas, 1.0)?;
    report.records.push(record("flow bound ratio (rotational)".into(), table.max_ratio, 1.0, table.max_ratio <= 1.0));
    let sym_pair = CommutingPair::random_symmetric(k, opts.seed);
    let sym_u0 = nalgebra::DVector::from_vec(crate::linalg::seeded_normal_vector(k, opts.seed.wrapping_add(1)));
    let sym_table = yosida_flow_convergence(&sym_pair, &sym_u0, &opts.lambdas, 1.0)?;
    report.records.push(record("flow bound ratio (symmetric)".into(), sym_table.max_ratio, 1.0, sym_table.max_ratio <= 1.0));

    let (slope, _) = yosida_rate_slope(&rot, &u0, &opts.lambdas, opts.reference_lambda, 1.0)?;
    let dev = (slope - HALF_ORDER.0).abs();
    report.records.push(record("rate slope deviation from 1/2".into(), dev, HALF_ORDER.1, dev <= HALF_ORDER.1));
    report.notes.push(format!("rotational pair: fitted rate {slope:.4}, relative commutator {:.2e}", rot.relative_commutator()));

    let segs: Vec<(nalgebra::DMatrix<f64>, f64)> = commuting_family(k, opts.segments, opts.seed)
        .into_iter()
        .enumerate()
        .map(|(i, a)| (a, 0.1 + 0.05 * i as f64))
        .collect();
    let (product, summed) = compose_piecewise(&segs)?;
    let r = spectral_norm(&(product - summed));
    report.records.push(record(format!("composition ({} segments)", opts.segments), r, opts.tolerance, r <= opts.tolerance));
    Ok((report.finish(start), table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain_grid::DomainSpec;

    fn c(v: f64) -> CoefficientSchedule {
        CoefficientSchedule::constant(v, 0.0, 1.0).unwrap()
    }
    fn halves(a: f64, b: f64) -> CoefficientSchedule {
        CoefficientSchedule::piecewise_constant(&[0.0, 0.5, 1.0], &[a, b]).unwrap()
    }

    #[test]
    fn oracle_defaults_match_empty_document() {
        let parsed: OracleOptions = serde_json::from_str("{}").unwrap();
        assert_eq!(parsed, OracleOptions::default());
        assert_eq!(parsed.barrier_tolerance, 0.02);
    }
    fn box_put() -> ProblemSpec {
        ProblemSpec {
            domain: DomainSpec::new(vec![50.0], vec![200.0], None).unwrap(),
            payoff: PayoffSpec::BasketPut { strike: 100.0 },
            nodes: vec![41],
            tau0: 0.0,
            maturity: 1.0,
            barrier_free: false,
        }
    }
    fn levels(n0: usize, dt0: f64) -> Vec<Level> {
        (0..3).map(|k| Level { nodes: vec![(n0 - 1) * (1 << k) + 1], dt: dt0 / (1 << k) as f64 }).collect()
    }

    #[test]
    fn constant_model_has_zero_residual() {
        let model = MarketModel::constant(0.03, 0.0, 0.0, &[0.25], &[], 1.0).unwrap();
        let scheme = SolveConfig::new(0.5, 0.1).unwrap();
        let rep = theorem2_check(&model, &box_put(), &levels(21, 1.0 / 16.0), &scheme, VolAveraging::RootMeanSquare, 1e-3).unwrap();
        assert!(rep.pass);
        assert!(rep.records.iter().all(|r| r.measured == 0.0));
    }

    #[test]
    fn piecewise_vol_residual_decreases() {
        let model = MarketModel::new(halves(0.02, 0.04), c(0.0), c(0.0), vec![halves(0.2, 0.3)], vec![]).unwrap();
        let scheme = SolveConfig::new(0.5, 0.1).unwrap();
        let rep = theorem2_check(&model, &box_put(), &levels(41, 1.0 / 32.0), &scheme, VolAveraging::RootMeanSquare, 1e-2).unwrap();
        let r = rep.measured();
        assert!(r[0] > r[1] && r[1] > r[2] && r[2] > 0.0, "{r:?}");
    }

    #[test]
    fn level_validation() {
        let model = MarketModel::constant(0.03, 0.0, 0.0, &[0.25], &[], 1.0).unwrap();
        let scheme = SolveConfig::new(0.5, 0.1).unwrap();
        let two = &levels(21, 0.1)[..2];
        assert!(theorem2_check(&model, &box_put(), two, &scheme, VolAveraging::RootMeanSquare, 1e-3).is_err());
        let mut bad = levels(21, 0.1);
        bad[2].dt = bad[1].dt;
        assert!(theorem2_check(&model, &box_put(), &bad, &scheme, VolAveraging::RootMeanSquare, 1e-3).is_err());
    }

    #[test]
    fn left_sampling() {
        let ramp = CoefficientSchedule::linear(0.0, 1.0, 0.2, 0.3).unwrap();
        let s = sample_left(&ramp, 0.0, 1.0, 4).unwrap();
        // engine t_k = k/4 is market time 1 - k/4
        assert_eq!(s.eval(0.9).unwrap(), 0.3);
        assert!((s.eval(0.6).unwrap() - 0.275).abs() < 1e-15);
        assert!((s.eval(0.1).unwrap() - 0.225).abs() < 1e-15);
        // a jump at an aligned point is reproduced exactly
        let step = halves(0.2, 0.3);
        let t = sample_left(&step, 0.0, 1.0, 4).unwrap();
        for x in [0.1, 0.3, 0.49, 0.5, 0.7, 0.99] {
            assert_eq!(t.eval(x).unwrap(), step.eval(x).unwrap());
        }
    }

    #[test]
    fn lemma5_constant_and_aligned_cases() {
        let scheme = SolveConfig::new(0.5, 1.0 / 32.0).unwrap();
        let constant = MarketModel::constant(0.03, 0.0, 0.0, &[0.25], &[], 1.0).unwrap();
        let rep = lemma5_check(&constant, &box_put(), &[2, 4, 8], &scheme).unwrap();
        assert!(rep.pass);
        assert!(rep.measured().iter().all(|&e| e == 0.0));

        let quarters = CoefficientSchedule::piecewise_constant(&[0.0, 0.25, 0.5, 0.75, 1.0], &[0.2, 0.3, 0.25, 0.35]).unwrap();
        let aligned = MarketModel::new(c(0.02), c(0.0), c(0.0), vec![quarters], vec![]).unwrap();
        let rep = lemma5_check(&aligned, &box_put(), &[2, 4, 8, 16], &scheme).unwrap();
        let e = rep.measured();
        assert!(e[0] > 0.0);
        assert_eq!(&e[1..], &[0.0, 0.0, 0.0]);
        assert!(rep.pass);
    }

    #[test]
    fn lemma5_ramp_converges_at_first_order() {
        let ramp = CoefficientSchedule::linear(0.0, 1.0, 0.2, 0.3).unwrap();
        let model = MarketModel::new(c(0.02), c(0.0), c(0.0), vec![ramp], vec![]).unwrap();
        let scheme = SolveConfig::new(0.5, 1.0 / 64.0).unwrap();
        let rep = lemma5_check(&model, &box_put(), &[2, 4, 8, 16], &scheme).unwrap();
        assert!(rep.pass);
        let e = rep.measured();
        for w in e.windows(2) {
            let ratio = w[1] / w[0];
            assert!((ratio - 0.5).abs() < 0.1, "{e:?}");
        }
    }

    #[test]
    fn energy_examples() {
        // b = 0: sigma^2 / 2 = r - m
        let sym = MarketModel::constant(0.02, 0.0, 0.08, &[0.2], &[], 1.0).unwrap();
        let scheme = SolveConfig::new(0.5, 1.0 / 32.0).unwrap();
        let rep = energy_check(&sym, &box_put(), &scheme).unwrap();
        assert!(rep.pass);
        assert!(rep.notes[0].contains("symmetric case: true"));

        let zero = ProblemSpec { payoff: PayoffSpec::Custom { values: vec![0.0; 41] }, ..box_put() };
        let rep = energy_check(&sym, &zero, &scheme).unwrap();
        assert!(rep.pass);
        assert!(rep.measured().iter().all(|&v| v == 0.0));

        let general = MarketModel::new(halves(0.02, 0.06), c(0.01), c(0.0), vec![halves(0.3, 0.2)], vec![]).unwrap();
        let rep = energy_check(&general, &box_put(), &scheme).unwrap();
        assert!(rep.pass);
    }

    #[test]
    fn report_outputs() {
        let model = MarketModel::constant(0.03, 0.0, 0.0, &[0.25], &[], 1.0).unwrap();
        let scheme = SolveConfig::new(0.5, 0.1).unwrap();
        let rep = theorem2_check(&model, &box_put(), &levels(21, 1.0 / 16.0), &scheme, VolAveraging::RootMeanSquare, 1e-3).unwrap();
        let text = rep.to_text();
        assert!(text.contains("verdict: pass"));
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let csv = String::from_utf8(buf).unwrap();
        assert!(csv.starts_with("experiment,label,nodes,dt,measured,bound,pass"));
        assert_eq!(csv.lines().count(), 4);
    }
}
