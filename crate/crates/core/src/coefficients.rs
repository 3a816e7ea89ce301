//! Time-dependent model coefficients and their averages.
//!
//! Every coefficient of the market model (rates, expense ratio, decrement,
//! volatilities and correlations) is a [`CoefficientSchedule`]: a contiguous
//! list of constant or linear segments in market time. Because every profile
//! is at most linear, products of up to three schedules are cubic on each
//! common piece and Simpson's rule integrates them exactly. All averages in
//! this module are therefore closed-form, with no quadrature error.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Threshold below which the diffusion matrix is treated as singular.
pub const ELLIPTICITY_FLOOR: f64 = 1e-12;

/// Default number of samples per piece for the ellipticity scan.
pub const DEFAULT_ELLIPTICITY_SAMPLES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Profile {
    Constant(f64),
    Linear { start: f64, end: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub t_start: f64,
    pub t_end: f64,
    pub profile: Profile,
}

impl Segment {
    /// Value of this segment's formula at `t` (extrapolated if `t` lies
    /// outside the segment).
    pub fn value_at(&self, t: f64) -> f64 {
        match self.profile {
            Profile::Constant(v) => v,
            Profile::Linear { start, end } => {
                start + (end - start) * (t - self.t_start) / (self.t_end - self.t_start)
            }
        }
    }

    fn values(&self) -> [f64; 2] {
        match self.profile {
            Profile::Constant(v) => [v, v],
            Profile::Linear { start, end } => [start, end],
        }
    }
}

/// A piecewise constant / piecewise linear function of market time.
///
/// Segments are contiguous; evaluation at an interior breakpoint uses the
/// segment to the right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<SegmentRecord>", into = "Vec<SegmentRecord>")]
pub struct CoefficientSchedule {
    segments: Vec<Segment>,
}

/// One record of the schedule text format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRecord {
    pub t_start: f64,
    pub t_end: f64,
    pub kind: ProfileKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_end: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileKind {
    Const,
    Linear,
}

impl TryFrom<SegmentRecord> for Segment {
    type Error = Error;

    fn try_from(rec: SegmentRecord) -> Result<Self> {
        let profile = match rec.kind {
            ProfileKind::Const => {
                if rec.v_start.is_some() || rec.v_end.is_some() {
                    return Err(Error::InvalidSchedule(
                        "`v_start`/`v_end` are only allowed on linear segments".into(),
                    ));
                }
                let v = rec.value.ok_or_else(|| {
                    Error::InvalidSchedule("const segment is missing `value`".into())
                })?;
                Profile::Constant(v)
            }
            ProfileKind::Linear => {
                if rec.value.is_some() {
                    return Err(Error::InvalidSchedule(
                        "`value` is only allowed on const segments".into(),
                    ));
                }
                match (rec.v_start, rec.v_end) {
                    (Some(start), Some(end)) => Profile::Linear { start, end },
                    _ => {
                        return Err(Error::InvalidSchedule(
                            "linear segment needs both `v_start` and `v_end`".into(),
                        ))
                    }
                }
            }
        };
        Ok(Segment {
            t_start: rec.t_start,
            t_end: rec.t_end,
            profile,
        })
    }
}

impl From<Segment> for SegmentRecord {
    fn from(seg: Segment) -> Self {
        match seg.profile {
            Profile::Constant(v) => SegmentRecord {
                t_start: seg.t_start,
                t_end: seg.t_end,
                kind: ProfileKind::Const,
                value: Some(v),
                v_start: None,
                v_end: None,
            },
            Profile::Linear { start, end } => SegmentRecord {
                t_start: seg.t_start,
                t_end: seg.t_end,
                kind: ProfileKind::Linear,
                value: None,
                v_start: Some(start),
                v_end: Some(end),
            },
        }
    }
}

impl TryFrom<Vec<SegmentRecord>> for CoefficientSchedule {
    type Error = Error;

    fn try_from(records: Vec<SegmentRecord>) -> Result<Self> {
        let segments = records
            .into_iter()
            .map(Segment::try_from)
            .collect::<Result<Vec<_>>>()?;
        CoefficientSchedule::new(segments)
    }
}

impl From<CoefficientSchedule> for Vec<SegmentRecord> {
    fn from(s: CoefficientSchedule) -> Self {
        s.segments.into_iter().map(SegmentRecord::from).collect()
    }
}

/// Parse a schedule from its JSON text form (a list of segment records).
pub fn parse_schedule(text: &str) -> Result<CoefficientSchedule> {
    Ok(serde_json::from_str(text)?)
}

impl CoefficientSchedule {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::InvalidSchedule("schedule has no segments".into()));
        }
        for (k, seg) in segments.iter().enumerate() {
            if !seg.t_start.is_finite() || !seg.t_end.is_finite() {
                return Err(Error::InvalidSchedule(format!(
                    "segment {k} has a non-finite time bound"
                )));
            }
            if seg.t_end <= seg.t_start {
                return Err(Error::InvalidSchedule(format!(
                    "segment {k} has t_end {} <= t_start {}",
                    seg.t_end, seg.t_start
                )));
            }
            if seg.values().iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidSchedule(format!(
                    "segment {k} has a non-finite value"
                )));
            }
            if k > 0 && segments[k - 1].t_end != seg.t_start {
                return Err(Error::InvalidSchedule(format!(
                    "segment {k} starts at {} but segment {} ends at {}",
                    seg.t_start,
                    k - 1,
                    segments[k - 1].t_end
                )));
            }
        }
        Ok(Self { segments })
    }

    pub fn constant(value: f64, t0: f64, t1: f64) -> Result<Self> {
        Self::new(vec![Segment {
            t_start: t0,
            t_end: t1,
            profile: Profile::Constant(value),
        }])
    }

    pub fn linear(t0: f64, t1: f64, v0: f64, v1: f64) -> Result<Self> {
        Self::new(vec![Segment {
            t_start: t0,
            t_end: t1,
            profile: Profile::Linear { start: v0, end: v1 },
        }])
    }

    /// `values[k]` holds on `[breaks[k], breaks[k + 1])`.
    pub fn piecewise_constant(breaks: &[f64], values: &[f64]) -> Result<Self> {
        if breaks.len() != values.len() + 1 {
            return Err(Error::InvalidSchedule(format!(
                "{} breakpoints cannot bound {} values",
                breaks.len(),
                values.len()
            )));
        }
        Self::new(
            values
                .iter()
                .enumerate()
                .map(|(k, &v)| Segment {
                    t_start: breaks[k],
                    t_end: breaks[k + 1],
                    profile: Profile::Constant(v),
                })
                .collect(),
        )
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn span(&self) -> (f64, f64) {
        (
            self.segments[0].t_start,
            self.segments[self.segments.len() - 1].t_end,
        )
    }

    /// Interior breakpoints, in increasing order.
    pub fn breakpoints(&self) -> Vec<f64> {
        self.segments[1..].iter().map(|s| s.t_start).collect()
    }

    fn check_in_span(&self, t: f64) -> Result<()> {
        let (start, end) = self.span();
        if t >= start && t <= end {
            Ok(())
        } else {
            Err(Error::OutOfRange { t, start, end })
        }
    }

    fn check_window(&self, t0: f64, t1: f64) -> Result<()> {
        if !(t1 > t0) {
            return Err(Error::InvalidInterval { t0, t1 });
        }
        self.check_in_span(t0)?;
        self.check_in_span(t1)
    }

    /// Index of the segment that owns `t` under right-continuity.
    fn segment_index(&self, t: f64) -> usize {
        let k = self.segments.partition_point(|s| s.t_start <= t);
        k.saturating_sub(1)
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        self.check_in_span(t)?;
        Ok(self.segments[self.segment_index(t)].value_at(t))
    }

    /// Evaluate the formula of the segment containing `reference` at `t`.
    ///
    /// Used to take one-sided limits at breakpoints: pass a reference point
    /// strictly inside the piece of interest.
    pub fn eval_near(&self, t: f64, reference: f64) -> f64 {
        self.segments[self.segment_index(reference)].value_at(t)
    }

    /// The common value if the schedule is one constant on `[t0, t1]`.
    pub fn constant_on(&self, t0: f64, t1: f64) -> Option<f64> {
        let mut value = None;
        for seg in &self.segments {
            if seg.t_end <= t0 || seg.t_start >= t1 {
                continue;
            }
            match (seg.profile, value) {
                (Profile::Constant(v), None) => value = Some(v),
                (Profile::Constant(v), Some(w)) if v.to_bits() == w.to_bits() => {}
                _ => return None,
            }
        }
        value
    }

    /// Exact `∫ v(s) ds` over `[t0, t1]`.
    pub fn integral(&self, t0: f64, t1: f64) -> Result<f64> {
        integrate_product(&[self], t0, t1)
    }

    pub fn average(&self, t0: f64, t1: f64) -> Result<f64> {
        self.check_window(t0, t1)?;
        if let Some(v) = self.constant_on(t0, t1) {
            return Ok(v);
        }
        Ok(self.integral(t0, t1)? / (t1 - t0))
    }

    /// Exact time average of `v(s)^2`.
    pub fn average_square(&self, t0: f64, t1: f64) -> Result<f64> {
        self.check_window(t0, t1)?;
        if let Some(v) = self.constant_on(t0, t1) {
            return Ok(v * v);
        }
        Ok(integrate_product(&[self, self], t0, t1)? / (t1 - t0))
    }

    /// Smallest value on the closed window; exact since profiles are linear.
    pub fn min_on(&self, t0: f64, t1: f64) -> f64 {
        self.segments
            .iter()
            .filter(|s| s.t_end >= t0 && s.t_start <= t1)
            .flat_map(|s| [s.value_at(s.t_start.max(t0)), s.value_at(s.t_end.min(t1))])
            .fold(f64::INFINITY, f64::min)
    }

    /// The schedule mirrored on its own span: `v'(s) = v(start + end - s)`.
    pub fn reversed(&self) -> Self {
        let (a, b) = self.span();
        let mut bounds: Vec<f64> = Vec::with_capacity(self.segments.len() + 1);
        bounds.push(a);
        for seg in self.segments.iter().skip(1).rev() {
            bounds.push(a + b - seg.t_start);
        }
        bounds.push(b);
        let segments = self
            .segments
            .iter()
            .rev()
            .enumerate()
            .map(|(k, seg)| Segment {
                t_start: bounds[k],
                t_end: bounds[k + 1],
                profile: match seg.profile {
                    Profile::Constant(v) => Profile::Constant(v),
                    Profile::Linear { start, end } => Profile::Linear {
                        start: end,
                        end: start,
                    },
                },
            })
            .collect();
        Self { segments }
    }

    /// Restrict to `[t0, t1]` and shift so the result starts at zero.
    pub fn shifted_window(&self, t0: f64, t1: f64) -> Result<Self> {
        self.check_window(t0, t1)?;
        let segments = self
            .segments
            .iter()
            .filter(|s| s.t_end > t0 && s.t_start < t1)
            .map(|s| {
                let a = s.t_start.max(t0);
                let b = s.t_end.min(t1);
                let profile = match s.profile {
                    Profile::Constant(v) => Profile::Constant(v),
                    Profile::Linear { .. } => Profile::Linear {
                        start: s.value_at(a),
                        end: s.value_at(b),
                    },
                };
                Segment {
                    t_start: a - t0,
                    t_end: b - t0,
                    profile,
                }
            })
            .collect();
        Self::new(segments)
    }
}

/// Union of the interior breakpoints of `schedules` that fall strictly
/// inside `(t0, t1)`, sorted and de-duplicated.
pub fn merged_breakpoints<'a>(
    schedules: impl IntoIterator<Item = &'a CoefficientSchedule>,
    t0: f64,
    t1: f64,
) -> Vec<f64> {
    let mut pts: Vec<f64> = schedules
        .into_iter()
        .flat_map(|s| s.breakpoints())
        .filter(|&b| b > t0 && b < t1)
        .collect();
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    pts
}

/// Exact `∫ Π factors(s) ds` over `[t0, t1]` for at most three factors.
///
/// On every common piece the integrand is a polynomial of degree at most
/// three, which Simpson's rule integrates exactly.
pub fn integrate_product(factors: &[&CoefficientSchedule], t0: f64, t1: f64) -> Result<f64> {
    if factors.is_empty() || factors.len() > 3 {
        return Err(Error::InvalidSchedule(format!(
            "exact product integration supports 1 to 3 factors, got {}",
            factors.len()
        )));
    }
    for f in factors {
        f.check_window(t0, t1)?;
    }
    let mut knots = vec![t0];
    knots.extend(merged_breakpoints(factors.iter().copied(), t0, t1));
    knots.push(t1);

    let mut total = 0.0;
    for w in knots.windows(2) {
        let (a, b) = (w[0], w[1]);
        let mid = 0.5 * (a + b);
        let (mut fa, mut fm, mut fb) = (1.0, 1.0, 1.0);
        for f in factors {
            let seg = &f.segments[f.segment_index(mid)];
            fa *= seg.value_at(a);
            fm *= seg.value_at(mid);
            fb *= seg.value_at(b);
        }
        total += (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    }
    Ok(total)
}

/// Root-mean-square volatility over `[t0, t1]`.
pub fn average_vol(sigma: &CoefficientSchedule, t0: f64, t1: f64) -> Result<f64> {
    sigma.check_window(t0, t1)?;
    let lowest = sigma.min_on(t0, t1);
    if !(lowest > 0.0) {
        return Err(Error::InvalidSchedule(format!(
            "volatility must stay positive, reaches {lowest}"
        )));
    }
    Ok(sigma.average_square(t0, t1)?.sqrt())
}

/// Volatility-weighted average correlation.
pub fn average_correlation(
    sigma_i: &CoefficientSchedule,
    sigma_j: &CoefficientSchedule,
    rho_ij: &CoefficientSchedule,
    t0: f64,
    t1: f64,
) -> Result<f64> {
    let si = average_vol(sigma_i, t0, t1)?;
    let sj = average_vol(sigma_j, t0, t1)?;
    if !(si * sj > 0.0) {
        return Err(Error::DegenerateVolatility(format!(
            "averaged volatilities {si} and {sj}"
        )));
    }
    if let (Some(_), Some(_), Some(rho)) = (
        sigma_i.constant_on(t0, t1),
        sigma_j.constant_on(t0, t1),
        rho_ij.constant_on(t0, t1),
    ) {
        return Ok(rho);
    }
    let cov = integrate_product(&[sigma_i, sigma_j, rho_ij], t0, t1)?;
    Ok(cov / ((t1 - t0) * si * sj))
}

/// `a_ij = rho_ij sigma_i sigma_j / 2` with the diagonal taken from `sigma_sq`.
pub fn diffusion_matrix(sigma: &[f64], sigma_sq: &[f64], rho: &DMatrix<f64>) -> DMatrix<f64> {
    let n = sigma.len();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            sigma_sq[i] / 2.0
        } else {
            rho[(i, j)] * sigma[i] * sigma[j] / 2.0
        }
    })
}

/// `b_i = sigma_i^2 / 2 - (r - m)`.
pub fn drift_vector(sigma_sq: &[f64], r: f64, m: f64) -> Vec<f64> {
    sigma_sq.iter().map(|s2| s2 / 2.0 - (r - m)).collect()
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Instantaneous (or averaged) market coefficients at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketPoint {
    pub r: f64,
    pub m: f64,
    pub d: f64,
    pub sigma: Vec<f64>,
    pub sigma_sq: Vec<f64>,
    pub rho: DMatrix<f64>,
}

impl MarketPoint {
    /// The matrix `(rho_ij sigma_i sigma_j)`.
    pub fn covariance(&self) -> DMatrix<f64> {
        diffusion_matrix(&self.sigma, &self.sigma_sq, &self.rho) * 2.0
    }
}

/// Which volatility average to use when building the constant-coefficient
/// equation. Only `RootMeanSquare` gives the equivalent equation;
/// `ArithmeticMean` exists as a falsification control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VolAveraging {
    #[default]
    RootMeanSquare,
    ArithmeticMean,
}

/// Multifactor market model with time-dependent coefficients.
#[derive(Debug, Clone)]
pub struct MarketModel {
    r: CoefficientSchedule,
    m: CoefficientSchedule,
    d: CoefficientSchedule,
    sigma: Vec<CoefficientSchedule>,
    rho: Vec<Vec<CoefficientSchedule>>,
    span: (f64, f64),
    ellipticity: f64,
}

impl MarketModel {
    /// Build and validate a model. Correlation pairs not listed are zero; the
    /// diagonal is one. Each `(i, j)` pair may be listed once, in either order.
    pub fn new(
        r: CoefficientSchedule,
        m: CoefficientSchedule,
        d: CoefficientSchedule,
        sigma: Vec<CoefficientSchedule>,
        correlations: Vec<(usize, usize, CoefficientSchedule)>,
    ) -> Result<Self> {
        let n = sigma.len();
        if n == 0 {
            return Err(Error::InvalidSchedule("model needs at least one asset".into()));
        }
        let mut start = f64::NEG_INFINITY;
        let mut end = f64::INFINITY;
        for s in [&r, &m, &d]
            .into_iter()
            .chain(sigma.iter())
            .chain(correlations.iter().map(|c| &c.2))
        {
            let (a, b) = s.span();
            start = start.max(a);
            end = end.min(b);
        }
        if !(end > start) {
            return Err(Error::InvalidSchedule(
                "schedules do not share a common time span".into(),
            ));
        }
        for (i, s) in sigma.iter().enumerate() {
            let lowest = s.min_on(start, end);
            if !(lowest > 0.0) {
                return Err(Error::InvalidSchedule(format!(
                    "sigma[{i}] must stay positive, reaches {lowest}"
                )));
            }
        }

        let zero = CoefficientSchedule::constant(0.0, start, end)?;
        let one = CoefficientSchedule::constant(1.0, start, end)?;
        let mut rho: Vec<Vec<Option<CoefficientSchedule>>> = vec![vec![None; n]; n];
        for (i, j, sched) in correlations {
            if i >= n || j >= n {
                return Err(Error::InvalidSchedule(format!(
                    "correlation ({i}, {j}) refers to a missing asset (n = {n})"
                )));
            }
            if i == j {
                return Err(Error::InvalidSchedule(format!(
                    "correlation ({i}, {i}) is fixed to one and cannot be set"
                )));
            }
            if rho[i][j].is_some() {
                return Err(Error::InvalidSchedule(format!(
                    "correlation ({i}, {j}) given more than once"
                )));
            }
            rho[i][j] = Some(sched.clone());
            rho[j][i] = Some(sched);
        }
        let rho = rho
            .into_iter()
            .enumerate()
            .map(|(i, row)| {
                row.into_iter()
                    .enumerate()
                    .map(|(j, s)| match s {
                        Some(s) => s,
                        None if i == j => one.clone(),
                        None => zero.clone(),
                    })
                    .collect()
            })
            .collect();

        let mut model = Self {
            r,
            m,
            d,
            sigma,
            rho,
            span: (start, end),
            ellipticity: 0.0,
        };
        model.ellipticity =
            check_uniform_ellipticity(&model, start, end, DEFAULT_ELLIPTICITY_SAMPLES)?;
        Ok(model)
    }

    /// Single-asset convenience constructor.
    pub fn single(
        r: CoefficientSchedule,
        m: CoefficientSchedule,
        d: CoefficientSchedule,
        sigma: CoefficientSchedule,
    ) -> Result<Self> {
        Self::new(r, m, d, vec![sigma], Vec::new())
    }

    /// Model with every coefficient constant on `[0, maturity]`.
    pub fn constant(
        r: f64,
        m: f64,
        d: f64,
        sigma: &[f64],
        rho: &[(usize, usize, f64)],
        maturity: f64,
    ) -> Result<Self> {
        let c = |v| CoefficientSchedule::constant(v, 0.0, maturity);
        Self::new(
            c(r)?,
            c(m)?,
            c(d)?,
            sigma.iter().map(|&s| c(s)).collect::<Result<_>>()?,
            rho.iter()
                .map(|&(i, j, v)| Ok((i, j, c(v)?)))
                .collect::<Result<_>>()?,
        )
    }

    pub fn n(&self) -> usize {
        self.sigma.len()
    }
    pub fn r(&self) -> &CoefficientSchedule {
        &self.r
    }
    pub fn m(&self) -> &CoefficientSchedule {
        &self.m
    }
    pub fn d(&self) -> &CoefficientSchedule {
        &self.d
    }
    pub fn sigma(&self, i: usize) -> &CoefficientSchedule {
        &self.sigma[i]
    }
    pub fn rho(&self, i: usize, j: usize) -> &CoefficientSchedule {
        &self.rho[i][j]
    }
    /// Common span of all schedules.
    pub fn span(&self) -> (f64, f64) {
        self.span
    }
    /// Ellipticity constant found when the model was built.
    pub fn ellipticity_constant(&self) -> f64 {
        self.ellipticity
    }

    fn all_schedules(&self) -> impl Iterator<Item = &CoefficientSchedule> {
        [&self.r, &self.m, &self.d]
            .into_iter()
            .chain(self.sigma.iter())
            .chain(self.rho.iter().flatten())
    }

    /// Union of every schedule's breakpoints inside `(t0, t1)`.
    pub fn breakpoints(&self, t0: f64, t1: f64) -> Vec<f64> {
        merged_breakpoints(self.all_schedules(), t0, t1)
    }

    pub fn market_at(&self, t: f64) -> Result<MarketPoint> {
        let (a, b) = self.span;
        if !(t >= a && t <= b) {
            return Err(Error::OutOfRange { t, start: a, end: b });
        }
        Ok(self.market_near(t, t))
    }

    /// Coefficients at `t` using, for each schedule, the segment that
    /// contains `reference`.
    pub fn market_near(&self, t: f64, reference: f64) -> MarketPoint {
        let n = self.n();
        let sigma: Vec<f64> = self.sigma.iter().map(|s| s.eval_near(t, reference)).collect();
        let sigma_sq = sigma.iter().map(|s| s * s).collect();
        let rho = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                1.0
            } else {
                self.rho[i][j].eval_near(t, reference)
            }
        });
        MarketPoint {
            r: self.r.eval_near(t, reference),
            m: self.m.eval_near(t, reference),
            d: self.d.eval_near(t, reference),
            sigma,
            sigma_sq,
            rho,
        }
    }

    fn map_schedules(
        &self,
        f: impl Fn(&CoefficientSchedule) -> Result<CoefficientSchedule>,
    ) -> Result<Self> {
        let n = self.n();
        let mut correlations = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                correlations.push((i, j, f(&self.rho[i][j])?));
            }
        }
        Self::new(
            f(&self.r)?,
            f(&self.m)?,
            f(&self.d)?,
            self.sigma.iter().map(&f).collect::<Result<_>>()?,
            correlations,
        )
    }

    /// Every schedule mirrored in time on its span.
    pub fn time_reversed(&self) -> Result<Self> {
        let (a, b) = self.span;
        self.map_schedules(|s| Ok(s.shifted_window(a, b)?.reversed()))
            .and_then(|m| m.map_schedules(|s| shift(s, a)))
    }

    /// Restrict to `[t0, t1]` and shift the time origin to `t0`.
    pub fn shifted_window(&self, t0: f64, t1: f64) -> Result<Self> {
        self.map_schedules(|s| s.shifted_window(t0, t1))
    }

    /// Build a model whose schedules come from `f`, one per coefficient.
    /// Used to derive piecewise-constant approximations.
    pub fn derive(
        &self,
        f: impl Fn(&CoefficientSchedule) -> Result<CoefficientSchedule>,
    ) -> Result<Self> {
        self.map_schedules(f)
    }
}

fn shift(s: &CoefficientSchedule, by: f64) -> Result<CoefficientSchedule> {
    CoefficientSchedule::new(
        s.segments
            .iter()
            .map(|seg| Segment {
                t_start: seg.t_start + by,
                t_end: seg.t_end + by,
                profile: seg.profile,
            })
            .collect(),
    )
}

/// Averaged coefficients of the equivalent constant-coefficient equation.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedCoefficients {
    pub r_bar: f64,
    pub m_bar: f64,
    pub d_bar: f64,
    pub sigma_bar: Vec<f64>,
    /// `sigma_bar[i]^2`, kept separately so that constant schedules reproduce
    /// the instantaneous coefficients bit for bit.
    pub sigma_bar_sq: Vec<f64>,
    pub rho_bar: DMatrix<f64>,
    pub a_bar: DMatrix<f64>,
    pub b_bar: Vec<f64>,
    pub q_bar: f64,
}

impl AveragedCoefficients {
    pub fn market_point(&self) -> MarketPoint {
        MarketPoint {
            r: self.r_bar,
            m: self.m_bar,
            d: self.d_bar,
            sigma: self.sigma_bar.clone(),
            sigma_sq: self.sigma_bar_sq.clone(),
            rho: self.rho_bar.clone(),
        }
    }
}

/// Averages over market times `[t0, t1]` (engine times `[0, t1 - t0]` when
/// `t1` is the maturity).
pub fn averaged_operator_coeffs(
    model: &MarketModel,
    t0: f64,
    t1: f64,
) -> Result<AveragedCoefficients> {
    averaged_operator_coeffs_with(model, t0, t1, VolAveraging::RootMeanSquare)
}

pub fn averaged_operator_coeffs_with(
    model: &MarketModel,
    t0: f64,
    t1: f64,
    rule: VolAveraging,
) -> Result<AveragedCoefficients> {
    let n = model.n();
    let r_bar = model.r.average(t0, t1)?;
    let m_bar = model.m.average(t0, t1)?;
    let d_bar = model.d.average(t0, t1)?;
    let rms = (0..n)
        .map(|i| average_vol(&model.sigma[i], t0, t1))
        .collect::<Result<Vec<_>>>()?;
    let mut rho_bar = DMatrix::identity(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = average_correlation(&model.sigma[i], &model.sigma[j], &model.rho[i][j], t0, t1)?;
            rho_bar[(i, j)] = v;
            rho_bar[(j, i)] = v;
        }
    }
    let (sigma_bar, sigma_bar_sq): (Vec<f64>, Vec<f64>) = match rule {
        VolAveraging::RootMeanSquare => (0..n)
            .map(|i| {
                let s2 = match model.sigma[i].constant_on(t0, t1) {
                    Some(v) => v * v,
                    None => rms[i] * rms[i],
                };
                (rms[i], s2)
            })
            .unzip(),
        VolAveraging::ArithmeticMean => (0..n)
            .map(|i| model.sigma[i].average(t0, t1).map(|s| (s, s * s)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip(),
    };
    let a_bar = diffusion_matrix(&sigma_bar, &sigma_bar_sq, &rho_bar);
    let b_bar = drift_vector(&sigma_bar_sq, r_bar, m_bar);
    let q_bar = r_bar + d_bar;
    Ok(AveragedCoefficients {
        r_bar,
        m_bar,
        d_bar,
        sigma_bar,
        sigma_bar_sq,
        rho_bar,
        a_bar,
        b_bar,
        q_bar,
    })
}

/// Exact time integrals of the operator coefficients over `[t0, t1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegratedCoefficients {
    pub duration: f64,
    /// `∫ rho_ij sigma_i sigma_j ds`.
    pub covariance: DMatrix<f64>,
    /// `∫ (sigma_i^2 / 2 - (r - m)) ds`.
    pub drift: Vec<f64>,
    /// `∫ (r + d) ds`.
    pub reaction: f64,
}

/// Integrate every coefficient exactly, piece by piece.
pub fn integrate_coefficients(model: &MarketModel, t0: f64, t1: f64) -> Result<IntegratedCoefficients> {
    let n = model.n();
    let mut knots = vec![t0];
    knots.extend(model.breakpoints(t0, t1));
    knots.push(t1);
    let mut covariance = DMatrix::zeros(n, n);
    let mut drift = vec![0.0; n];
    let mut reaction = 0.0;
    for w in knots.windows(2) {
        let (a, b) = (w[0], w[1]);
        let carry = model.r.integral(a, b)? - model.m.integral(a, b)?;
        reaction += model.r.integral(a, b)? + model.d.integral(a, b)?;
        for i in 0..n {
            let var = integrate_product(&[&model.sigma[i], &model.sigma[i]], a, b)?;
            covariance[(i, i)] += var;
            drift[i] += var / 2.0 - carry;
            for j in (i + 1)..n {
                let c = integrate_product(&[&model.sigma[i], &model.sigma[j], &model.rho[i][j]], a, b)?;
                covariance[(i, j)] += c;
                covariance[(j, i)] += c;
            }
        }
    }
    Ok(IntegratedCoefficients {
        duration: t1 - t0,
        covariance,
        drift,
        reaction,
    })
}

/// Minimum over sampled times in `[t0, t1]` of the smallest eigenvalue of
/// `(rho_ij sigma_i sigma_j)`. Each piece between breakpoints gets `samples`
/// evenly spaced points including both of its endpoints, each endpoint
/// evaluated as a one-sided limit from inside the piece.
pub fn check_uniform_ellipticity(
    model: &MarketModel,
    t0: f64,
    t1: f64,
    samples: usize,
) -> Result<f64> {
    if samples < 2 {
        return Err(Error::InvalidSchedule(format!(
            "ellipticity scan needs at least 2 samples per piece, got {samples}"
        )));
    }
    if !(t1 > t0) {
        return Err(Error::InvalidInterval { t0, t1 });
    }
    let mut knots = vec![t0];
    knots.extend(model.breakpoints(t0, t1));
    knots.push(t1);
    let mut c = f64::INFINITY;
    for w in knots.windows(2) {
        let (a, b) = (w[0], w[1]);
        let mid = 0.5 * (a + b);
        for k in 0..samples {
            let t = if k + 1 == samples {
                b
            } else {
                a + (b - a) * k as f64 / (samples - 1) as f64
            };
            let lam = min_eigenvalue(&model.market_near(t, mid).covariance());
            if !(lam > ELLIPTICITY_FLOOR) {
                return Err(Error::EllipticityViolation {
                    time: t,
                    min_eigenvalue: lam,
                });
            }
            c = c.min(lam);
        }
    }
    Ok(c)
}

/// Smallest eigenvalue of the averaged matrix `(rho_bar sigma_bar sigma_bar)`.
pub fn averaged_ellipticity(avg: &AveragedCoefficients) -> f64 {
    min_eigenvalue(&avg.market_point().covariance())
}
