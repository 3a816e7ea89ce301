//! Experiment documents (JSON) and `key=value` overrides.
//!
//! Times in a document are market times `τ`; the engine works in
//! `t = T - τ`.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::analytic_oracles::MultiplierRoute;
use crate::coefficients::{CoefficientSchedule, MarketModel, VolAveraging};
use crate::domain_grid::{DomainSpec, PayoffSpec};
use crate::mc_oracle::{MCConfig, DEFAULT_STEPS_PER_YEAR};
use crate::timestepper::{ProblemSpec, SolveConfig, StoreTimes, DEFAULT_MAX_ITER, DEFAULT_TOLERANCE};
use crate::verify::{Level, OracleOptions, SemigroupOptions};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Average,
    Solve,
    VerifyTheorem2,
    VerifyLemma5,
    Mc,
    Fourier,
    Semigroup,
    Energy,
    OracleAgreement,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Average => "average",
            Self::Solve => "solve",
            Self::VerifyTheorem2 => "verify-theorem2",
            Self::VerifyLemma5 => "verify-lemma5",
            Self::Mc => "mc",
            Self::Fourier => "fourier",
            Self::Semigroup => "semigroup",
            Self::Energy => "energy",
            Self::OracleAgreement => "oracle-agreement",
        }
    }

    fn needs_model(self) -> bool {
        self != Self::Semigroup
    }

    fn needs_problem(self) -> bool {
        !matches!(self, Self::Semigroup | Self::Average)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<DomainBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payoff: Option<PayoffSpec>,
    #[serde(default)]
    pub solver: SolverBlock,
    pub experiment: ExperimentBlock,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelationEntry {
    pub i: usize,
    pub j: usize,
    pub schedule: CoefficientSchedule,
}

/// Market model over market times `[tau0, maturity]`. `m` and `d` default
/// to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub n: usize,
    #[serde(default)]
    pub tau0: f64,
    pub maturity: f64,
    pub r: CoefficientSchedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<CoefficientSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<CoefficientSchedule>,
    pub sigma: Vec<CoefficientSchedule>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rho: Vec<CorrelationEntry>,
}

impl ModelBlock {
    pub fn build(&self) -> Result<MarketModel> {
        if self.sigma.len() != self.n {
            return Err(Error::Config(format!("model.sigma: expected {} schedules, got {}", self.n, self.sigma.len())));
        }
        if !(self.maturity > self.tau0) {
            return Err(Error::Config(format!(
                "model: maturity {} must lie after tau0 {}",
                self.maturity, self.tau0
            )));
        }
        let zero = || CoefficientSchedule::constant(0.0, self.tau0, self.maturity);
        let model = MarketModel::new(
            self.r.clone(),
            self.m.clone().map_or_else(zero, Ok)?,
            self.d.clone().map_or_else(zero, Ok)?,
            self.sigma.clone(),
            self.rho.iter().map(|c| (c.i, c.j, c.schedule.clone())).collect(),
        )?;
        let (a, b) = model.span();
        if a > self.tau0 || b < self.maturity {
            return Err(Error::Config(format!(
                "model: schedules cover [{a}, {b}] but [{}, {}] is required",
                self.tau0, self.maturity
            )));
        }
        Ok(model)
    }
}

/// Either an explicit box (plus optional sum barrier) or, for barrier-free
/// problems, a truncation box `center · e^{±half_width}`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sum_barrier: Option<f64>,
    #[serde(default)]
    pub barrier_free: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<f64>>,
    /// Log-space half width of the truncation box.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub half_width: Option<f64>,
}

impl DomainBlock {
    pub fn build(&self) -> Result<DomainSpec> {
        let ctx = |e: Error| Error::Config(format!("domain: {e}"));
        match (&self.lower, &self.upper, &self.center, self.half_width) {
            (Some(lo), Some(up), None, None) => {
                DomainSpec::new(lo.clone(), up.clone(), self.sum_barrier).map_err(ctx)
            }
            (None, None, Some(c), Some(w)) if self.barrier_free => {
                if self.sum_barrier.is_some() {
                    return Err(Error::Config("domain: a barrier-free box cannot carry a sum barrier".into()));
                }
                if !(w > 0.0) {
                    return Err(Error::Config(format!("domain.half_width must be positive, got {w}")));
                }
                DomainSpec::barrier_free_box(c, w).map_err(ctx)
            }
            _ => Err(Error::Config(
                "domain: give `lower` and `upper`, or `barrier_free` with `center` and `half_width`".into(),
            )),
        }
    }
}

/// Which snapshots a solve keeps.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Snapshots {
    #[default]
    Final,
    EveryStep,
    MarketTimes(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverBlock {
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub nodes: Vec<usize>,
    /// Defaults to on for `theta < 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rannacher: Option<bool>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub snapshots: Snapshots,
}

fn default_theta() -> f64 {
    0.5
}
fn default_dt() -> f64 {
    1.0 / 128.0
}
fn default_tolerance() -> f64 {
    DEFAULT_TOLERANCE
}
fn default_max_iter() -> usize {
    DEFAULT_MAX_ITER
}

impl Default for SolverBlock {
    fn default() -> Self {
        Self {
            theta: default_theta(),
            dt: default_dt(),
            nodes: Vec::new(),
            rannacher: None,
            tolerance: default_tolerance(),
            max_iter: default_max_iter(),
            snapshots: Snapshots::Final,
        }
    }
}

impl SolverBlock {
    pub fn build(&self, maturity: f64) -> Result<SolveConfig> {
        let mut cfg = SolveConfig::new(self.theta, self.dt).map_err(|e| Error::Config(format!("solver: {e}")))?;
        if let Some(on) = self.rannacher {
            cfg.rannacher = on;
        }
        if !(self.tolerance > 0.0) || self.max_iter == 0 {
            return Err(Error::Config("solver: tolerance and max_iter must be positive".into()));
        }
        cfg.tolerance = self.tolerance;
        cfg.max_iter = self.max_iter;
        cfg.store = match &self.snapshots {
            Snapshots::Final => StoreTimes::FinalOnly,
            Snapshots::EveryStep => StoreTimes::EveryStep,
            Snapshots::MarketTimes(ts) => StoreTimes::Times(ts.iter().map(|tau| maturity - tau).collect()),
        };
        Ok(cfg)
    }
}

/// Kind, seed, optional tolerance and kind-specific parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentBlock {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub params: Map<String, Value>,
}

/// Volatility averaging rule as written in documents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolAverage {
    #[default]
    Rms,
    Arithmetic,
}

impl From<VolAverage> for VolAveraging {
    fn from(v: VolAverage) -> Self {
        match v {
            VolAverage::Rms => VolAveraging::RootMeanSquare,
            VolAverage::Arithmetic => VolAveraging::ArithmeticMean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AverageParams {
    #[serde(default)]
    pub vol_average: VolAverage,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveParams {
    /// Solve the averaged equation instead of the time-dependent one.
    #[serde(default)]
    pub averaged: bool,
    #[serde(default)]
    pub vol_average: VolAverage,
    /// Asset points at which prices are reported.
    #[serde(default)]
    pub spots: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Theorem2Params {
    /// Explicit levels; otherwise `level_count` halvings of the solver grid
    /// and time step.
    #[serde(default)]
    pub levels: Option<Vec<Level>>,
    #[serde(default)]
    pub level_count: Option<usize>,
    #[serde(default)]
    pub vol_average: VolAverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lemma5Params {
    #[serde(default = "default_n_list")]
    pub n_list: Vec<usize>,
}

fn default_n_list() -> Vec<usize> {
    vec![2, 4, 8, 16]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McParams {
    pub paths: usize,
    #[serde(default = "default_steps")]
    pub steps_per_year: usize,
    #[serde(default)]
    pub antithetic: bool,
    pub spot: Vec<f64>,
    /// Compare terminal log-moments with the averaged Gaussian law.
    #[serde(default = "yes")]
    pub moments: bool,
}

fn default_steps() -> usize {
    DEFAULT_STEPS_PER_YEAR
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FourierParams {
    #[serde(default = "default_route")]
    pub route: MultiplierRoute,
    /// Also compare against the finite-difference solve on the same box.
    #[serde(default)]
    pub compare_pde: bool,
}

fn default_route() -> MultiplierRoute {
    MultiplierRoute::TimeDependent
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleParams {
    #[serde(default)]
    pub closed_form: bool,
    #[serde(default)]
    pub fourier: bool,
    /// Monte Carlo paths; omitted disables the comparison.
    #[serde(default)]
    pub mc_paths: Option<usize>,
    #[serde(default = "default_steps")]
    pub steps_per_year: usize,
    #[serde(default)]
    pub antithetic: bool,
    #[serde(default)]
    pub spot: Vec<f64>,
    #[serde(default = "default_barrier_tolerance")]
    pub barrier_tolerance: f64,
}

fn default_barrier_tolerance() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyParams {}

/// Semigroup parameters without the seed and tolerance, which live in the
/// experiment block.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemigroupParams {
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub seeds: Option<usize>,
    #[serde(default)]
    pub lambdas: Option<Vec<f64>>,
    #[serde(default)]
    pub reference_lambda: Option<f64>,
    #[serde(default)]
    pub probes: Option<usize>,
    #[serde(default)]
    pub segments: Option<usize>,
}

/// Typed experiment after validation.
#[derive(Debug, Clone, PartialEq)]
pub enum Experiment {
    Average(AverageParams),
    Solve(SolveParams),
    Theorem2 { levels: Vec<Level>, rule: VolAveraging, tolerance: f64 },
    Lemma5(Lemma5Params),
    Mc { mc: MCConfig, spot: Vec<f64>, moments: bool, sigmas: f64 },
    Fourier { params: FourierParams, tolerance: f64 },
    Semigroup(SemigroupOptions),
    Energy,
    Oracle(OracleOptions),
}

/// Everything a run needs, built from a validated document.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub kind: ExperimentKind,
    pub model: Option<MarketModel>,
    pub problem: Option<ProblemSpec>,
    pub solve: Option<SolveConfig>,
    pub experiment: Experiment,
}

fn params<T: for<'de> Deserialize<'de>>(block: &ExperimentBlock) -> Result<T> {
    let value = Value::Object(block.params.clone());
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "experiment.params".to_string() } else { format!("experiment.params.{path}") };
        Error::Config(format!("{field}: {}", e.inner()))
    })
}

/// Default refinement tolerance: tighter in one dimension.
pub fn default_theorem2_tolerance(n: usize) -> f64 {
    if n == 1 {
        1e-3
    } else {
        3e-3
    }
}

impl ExperimentConfig {
    /// Check the document and build the engine objects.
    pub fn prepare(&self) -> Result<Prepared> {
        let kind = self.experiment.kind;
        if let Some(t) = self.experiment.tolerance {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("experiment.tolerance must be positive, got {t}")));
            }
        }
        let model_block = match (&self.model, kind.needs_model()) {
            (Some(m), true) => Some(m),
            (None, true) => return Err(Error::Config(format!("model: required for `{}`", kind.name()))),
            (_, false) => None,
        };
        let model = model_block.map(|m| m.build()).transpose()?;

        let (problem, solve) = match (model_block, kind.needs_problem()) {
            (Some(mb), true) => {
                let domain = self
                    .domain
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("domain: required for `{}`", kind.name())))?
                    .build()?;
                let payoff = self
                    .payoff
                    .clone()
                    .ok_or_else(|| Error::Config(format!("payoff: required for `{}`", kind.name())))?;
                if self.solver.nodes.len() != mb.n {
                    return Err(Error::Config(format!(
                        "solver.nodes: expected {} entries, got {}",
                        mb.n,
                        self.solver.nodes.len()
                    )));
                }
                if let Some(&k) = self.solver.nodes.iter().find(|&&k| k < 5) {
                    return Err(Error::Config(format!("solver.nodes: at least 5 nodes per axis, got {k}")));
                }
                let problem = ProblemSpec {
                    barrier_free: self.domain.as_ref().is_some_and(|d| d.barrier_free),
                    domain,
                    payoff,
                    nodes: self.solver.nodes.clone(),
                    tau0: mb.tau0,
                    maturity: mb.maturity,
                };
                problem.validate(model.as_ref().expect("model built"))?;
                (Some(problem), Some(self.solver.build(mb.maturity)?))
            }
            _ => (None, None),
        };

        let b = &self.experiment;
        let n = model.as_ref().map_or(0, |m| m.n());
        let experiment = match kind {
            ExperimentKind::Average => Experiment::Average(params(b)?),
            ExperimentKind::Solve => Experiment::Solve(params(b)?),
            ExperimentKind::VerifyTheorem2 => {
                let p: Theorem2Params = params(b)?;
                let levels = match (p.levels, p.level_count) {
                    (Some(_), Some(_)) => {
                        return Err(Error::Config("experiment.params: give `levels` or `level_count`, not both".into()))
                    }
                    (Some(l), None) => l,
                    (None, count) => {
                        let count = count.unwrap_or(3);
                        if !(3..=8).contains(&count) {
                            return Err(Error::Config(format!("experiment.params.level_count: 3 to 8, got {count}")));
                        }
                        (0..count)
                            .map(|k| Level {
                                nodes: self.solver.nodes.iter().map(|m| (m - 1) * (1 << k) + 1).collect(),
                                dt: self.solver.dt / (1u64 << k) as f64,
                            })
                            .collect()
                    }
                };
                Experiment::Theorem2 {
                    levels,
                    rule: p.vol_average.into(),
                    tolerance: b.tolerance.unwrap_or_else(|| default_theorem2_tolerance(n)),
                }
            }
            ExperimentKind::VerifyLemma5 => Experiment::Lemma5(params(b)?),
            ExperimentKind::Mc => {
                let p: McParams = params(b)?;
                let mc = MCConfig { paths: p.paths, steps_per_year: p.steps_per_year, seed: b.seed, antithetic: p.antithetic };
                mc.validate()?;
                Experiment::Mc { mc, spot: p.spot, moments: p.moments, sigmas: b.tolerance.unwrap_or(3.0) }
            }
            ExperimentKind::Fourier => {
                Experiment::Fourier { params: params(b)?, tolerance: b.tolerance.unwrap_or(1e-3) }
            }
            ExperimentKind::Semigroup => {
                let p: SemigroupParams = params(b)?;
                let d = SemigroupOptions::default();
                Experiment::Semigroup(SemigroupOptions {
                    dim: p.dim.unwrap_or(d.dim),
                    seeds: p.seeds.unwrap_or(d.seeds),
                    lambdas: p.lambdas.unwrap_or(d.lambdas),
                    reference_lambda: p.reference_lambda.unwrap_or(d.reference_lambda),
                    probes: p.probes.unwrap_or(d.probes),
                    segments: p.segments.unwrap_or(d.segments),
                    tolerance: b.tolerance.unwrap_or(d.tolerance),
                    seed: b.seed,
                })
            }
            ExperimentKind::Energy => {
                let _: EnergyParams = params(b)?;
                Experiment::Energy
            }
            ExperimentKind::OracleAgreement => {
                let p: OracleParams = params(b)?;
                let mc = p
                    .mc_paths
                    .map(|paths| MCConfig { paths, steps_per_year: p.steps_per_year, seed: b.seed, antithetic: p.antithetic });
                if let Some(mc) = &mc {
                    mc.validate()?;
                }
                Experiment::Oracle(OracleOptions {
                    closed_form: p.closed_form,
                    fourier: p.fourier,
                    mc,
                    spot: p.spot,
                    relative_tolerance: b.tolerance.unwrap_or(1e-3),
                    barrier_tolerance: p.barrier_tolerance,
                })
            }
        };
        Ok(Prepared { kind, model, problem, solve, experiment })
    }
}

fn path_error(e: serde_path_to_error::Error<serde_json::Error>) -> Error {
    let path = e.path().to_string();
    if path == "." {
        Error::Config(e.inner().to_string())
    } else {
        Error::Config(format!("{path}: {}", e.inner()))
    }
}

/// Parse a document into its raw JSON tree.
pub fn parse_document(text: &str) -> Result<Value> {
    serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))
}

/// Typed config from a JSON tree; errors name the offending field.
pub fn from_document(doc: Value) -> Result<ExperimentConfig> {
    serde_path_to_error::deserialize(doc).map_err(path_error)
}

/// Parse and validate a config document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg = from_document(parse_document(text)?)?;
    cfg.prepare()?;
    Ok(cfg)
}

/// Apply `a.b.c=value` to a JSON tree. The value is read as JSON when it
/// parses, else as a string. Numeric segments index arrays; missing object
/// keys are created.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override `{spec}` has an empty key segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    for (depth, key) in keys.iter().enumerate() {
        let last = depth + 1 == keys.len();
        let here = keys[..=depth].join(".");
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(key.to_string(), value);
                    return Ok(());
                }
                map.entry(key.to_string()).or_insert_with(|| Value::Object(Map::new()))
            }
            Value::Array(items) => {
                let idx: usize = key
                    .parse()
                    .map_err(|_| Error::Config(format!("override `{here}`: `{key}` is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("override `{here}`: index {idx} out of range (length {len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::Config(format!("override `{here}`: parent is not an object or array"))),
        };
    }
    unreachable!("the loop returns on the last key")
}

/// Read a document, apply overrides in order, and validate.
pub fn load_with_overrides(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut doc = parse_document(text)?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg = from_document(doc)?;
    cfg.prepare()?;
    Ok(cfg)
}

/// Pretty JSON of the effective config.
pub fn to_json(cfg: &ExperimentConfig) -> Result<String> {
    Ok(serde_json::to_string_pretty(cfg)?)
}
