//! Knock-out domains, their log-space grids and payoffs.
//!
//! The domain is a box of barriers in asset-price units, optionally cut by an
//! up-and-out barrier on the basket sum. Grids are uniform in `x = ln y`, so
//! box faces land exactly on nodes; the sum barrier is realised by masking
//! every node with `Σ exp(x_i) >= L` (a first-order staircase).

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DomainRecord", into = "DomainRecord")]
pub struct DomainSpec {
    lower: Vec<f64>,
    upper: Vec<f64>,
    sum_barrier: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DomainRecord {
    lower: Vec<f64>,
    upper: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sum_barrier: Option<f64>,
}

impl TryFrom<DomainRecord> for DomainSpec {
    type Error = Error;
    fn try_from(r: DomainRecord) -> Result<Self> {
        DomainSpec::new(r.lower, r.upper, r.sum_barrier)
    }
}

impl From<DomainSpec> for DomainRecord {
    fn from(d: DomainSpec) -> Self {
        DomainRecord {
            lower: d.lower,
            upper: d.upper,
            sum_barrier: d.sum_barrier,
        }
    }
}

impl DomainSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, sum_barrier: Option<f64>) -> Result<Self> {
        if lower.is_empty() {
            return Err(Error::Domain("domain needs at least one axis".into()));
        }
        if lower.len() != upper.len() {
            return Err(Error::Shape {
                what: "upper barriers",
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for (i, (&lo, &hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo > 0.0 && hi > lo && hi.is_finite()) {
                return Err(Error::Domain(format!(
                    "axis {i}: barriers must satisfy 0 < lower < upper, got [{lo}, {hi}]"
                )));
            }
        }
        if let Some(l) = sum_barrier {
            let floor: f64 = lower.iter().sum();
            if !(l > floor) {
                return Err(Error::Domain(format!(
                    "sum barrier {l} must exceed the sum of lower barriers {floor}"
                )));
            }
        }
        Ok(Self {
            lower,
            upper,
            sum_barrier,
        })
    }

    /// Wide box `center * exp(±half_width)` per axis, used to emulate an
    /// unbounded domain.
    pub fn barrier_free_box(center: &[f64], half_width: f64) -> Result<Self> {
        Self::new(
            center.iter().map(|c| c * (-half_width).exp()).collect(),
            center.iter().map(|c| c * half_width.exp()).collect(),
            None,
        )
    }

    pub fn n(&self) -> usize {
        self.lower.len()
    }
    pub fn lower(&self) -> &[f64] {
        &self.lower
    }
    pub fn upper(&self) -> &[f64] {
        &self.upper
    }
    pub fn sum_barrier(&self) -> Option<f64> {
        self.sum_barrier
    }

    /// Whether `y` lies strictly inside the knock-out region.
    pub fn contains(&self, y: &[f64]) -> bool {
        let in_box = y
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(&v, (&lo, &hi))| v > lo && v < hi);
        in_box && self.sum_barrier.is_none_or(|l| y.iter().sum::<f64>() < l)
    }
}

pub fn log_transform(y: &[f64]) -> Result<Vec<f64>> {
    y.iter()
        .map(|&v| {
            if v > 0.0 {
                Ok(v.ln())
            } else {
                Err(Error::Domain(format!("asset value {v} must be positive")))
            }
        })
        .collect()
}

pub fn exp_transform(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.exp()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeClass {
    Interior,
    Dirichlet,
}

/// Where norms are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureRegion {
    /// Every interior node.
    #[default]
    Interior,
    /// Interior nodes in the central 50% of every axis.
    Core,
}

const NO_INTERIOR: usize = usize::MAX;

/// Uniform log-space grid over a knock-out box with a Dirichlet mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dims: Vec<usize>,
    lower_log: Vec<f64>,
    upper_log: Vec<f64>,
    spacing: Vec<f64>,
    strides: Vec<usize>,
    class: Vec<NodeClass>,
    interior: Vec<usize>,
    interior_of: Vec<usize>,
}

pub fn build_grid(domain: &DomainSpec, nodes_per_axis: &[usize]) -> Result<Grid> {
    let n = domain.n();
    if nodes_per_axis.len() != n {
        return Err(Error::Shape {
            what: "nodes per axis",
            expected: n,
            got: nodes_per_axis.len(),
        });
    }
    if let Some(&bad) = nodes_per_axis.iter().find(|&&k| k < 5) {
        return Err(Error::Domain(format!(
            "each axis needs at least 5 nodes, got {bad}"
        )));
    }
    let lower_log: Vec<f64> = domain.lower.iter().map(|v| v.ln()).collect();
    let upper_log: Vec<f64> = domain.upper.iter().map(|v| v.ln()).collect();
    let spacing: Vec<f64> = (0..n)
        .map(|i| (upper_log[i] - lower_log[i]) / (nodes_per_axis[i] - 1) as f64)
        .collect();
    let mut strides = vec![1; n];
    for i in 1..n {
        strides[i] = strides[i - 1] * nodes_per_axis[i - 1];
    }
    let total: usize = nodes_per_axis.iter().product();

    let mut grid = Grid {
        dims: nodes_per_axis.to_vec(),
        lower_log,
        upper_log,
        spacing,
        strides,
        class: Vec::with_capacity(total),
        interior: Vec::new(),
        interior_of: vec![NO_INTERIOR; total],
    };
    for flat in 0..total {
        let idx = grid.multi_index(flat);
        let on_face = idx.iter().zip(&grid.dims).any(|(&k, &d)| k == 0 || k + 1 == d);
        let cut = domain.sum_barrier.is_some_and(|l| {
            let s: f64 = (0..n).map(|i| grid.coord(i, idx[i]).exp()).sum();
            s >= l
        });
        if on_face || cut {
            grid.class.push(NodeClass::Dirichlet);
        } else {
            grid.interior_of[flat] = grid.interior.len();
            grid.interior.push(flat);
            grid.class.push(NodeClass::Interior);
        }
    }
    if grid.interior.is_empty() {
        return Err(Error::DegenerateDomain);
    }
    Ok(grid)
}

impl Grid {
    pub fn n(&self) -> usize {
        self.dims.len()
    }
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }
    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }
    pub fn strides(&self) -> &[usize] {
        &self.strides
    }
    pub fn node_count(&self) -> usize {
        self.class.len()
    }
    pub fn interior_count(&self) -> usize {
        self.interior.len()
    }
    pub fn classes(&self) -> &[NodeClass] {
        &self.class
    }
    /// Flat node ids of the interior unknowns, in unknown order.
    pub fn interior_nodes(&self) -> &[usize] {
        &self.interior
    }
    pub fn interior_index(&self, flat: usize) -> Option<usize> {
        match self.interior_of[flat] {
            NO_INTERIOR => None,
            k => Some(k),
        }
    }
    pub fn lower_log(&self) -> &[f64] {
        &self.lower_log
    }
    pub fn upper_log(&self) -> &[f64] {
        &self.upper_log
    }

    /// Log coordinate of node `k` on `axis`; the last node is the upper
    /// barrier exactly.
    pub fn coord(&self, axis: usize, k: usize) -> f64 {
        if k + 1 == self.dims[axis] {
            self.upper_log[axis]
        } else {
            self.lower_log[axis] + k as f64 * self.spacing[axis]
        }
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

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(k, s)| k * s).sum()
    }

    pub fn node_coords(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat)
            .iter()
            .enumerate()
            .map(|(axis, &k)| self.coord(axis, k))
            .collect()
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Restrict a full nodal vector to the interior unknowns.
    pub fn gather(&self, full: &[f64]) -> Vec<f64> {
        self.interior.iter().map(|&f| full[f]).collect()
    }

    /// Expand interior unknowns to a full nodal vector with zeros on the
    /// Dirichlet nodes.
    pub fn scatter(&self, interior: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.node_count()];
        for (&f, &v) in self.interior.iter().zip(interior) {
            full[f] = v;
        }
        full
    }

    pub fn in_region(&self, flat: usize, region: MeasureRegion) -> bool {
        if self.class[flat] != NodeClass::Interior {
            return false;
        }
        match region {
            MeasureRegion::Interior => true,
            MeasureRegion::Core => self.multi_index(flat).iter().enumerate().all(|(axis, &k)| {
                let width = self.upper_log[axis] - self.lower_log[axis];
                let x = self.coord(axis, k) - self.lower_log[axis];
                let eps = 1e-12 * width;
                x >= 0.25 * width - eps && x <= 0.75 * width + eps
            }),
        }
    }

    /// Discrete L2 norm over `region` of a full nodal vector.
    pub fn l2_norm(&self, full: &[f64], region: MeasureRegion) -> f64 {
        let s: f64 = (0..self.node_count())
            .filter(|&f| self.in_region(f, region))
            .map(|f| full[f] * full[f])
            .sum();
        (s * self.cell_volume()).sqrt()
    }

    /// Discrete L2 norm of the difference of two full nodal vectors.
    pub fn l2_distance(&self, a: &[f64], b: &[f64], region: MeasureRegion) -> f64 {
        let s: f64 = (0..self.node_count())
            .filter(|&f| self.in_region(f, region))
            .map(|f| (a[f] - b[f]).powi(2))
            .sum();
        (s * self.cell_volume()).sqrt()
    }

    /// Multilinear interpolation of a full nodal vector at log point `x`.
    pub fn interpolate(&self, full: &[f64], x: &[f64]) -> Result<f64> {
        let n = self.n();
        if x.len() != n {
            return Err(Error::Shape { what: "interpolation point", expected: n, got: x.len() });
        }
        let mut base = vec![0usize; n];
        let mut frac = vec![0.0; n];
        for axis in 0..n {
            let s = (x[axis] - self.lower_log[axis]) / self.spacing[axis];
            if !(s >= -1e-9 && s <= (self.dims[axis] - 1) as f64 + 1e-9) {
                return Err(Error::Domain(format!(
                    "point {} lies outside grid axis {axis}",
                    x[axis]
                )));
            }
            let k = (s.floor() as usize).min(self.dims[axis] - 2);
            base[axis] = k;
            frac[axis] = (s - k as f64).clamp(0.0, 1.0);
        }
        let mut value = 0.0;
        for corner in 0..(1usize << n) {
            let mut w = 1.0;
            let mut idx = base.clone();
            for axis in 0..n {
                if corner >> axis & 1 == 1 {
                    idx[axis] += 1;
                    w *= frac[axis];
                } else {
                    w *= 1.0 - frac[axis];
                }
            }
            if w != 0.0 {
                value += w * full[self.flat_index(&idx)];
            }
        }
        Ok(value)
    }
}

/// Terminal payoff `g`, in asset-price units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PayoffSpec {
    /// `max(K - Σ y_i, 0)`.
    BasketPut { strike: f64 },
    /// `max(Σ y_i - K, 0)`.
    BasketCall { strike: f64 },
    /// `max(K - y_asset, 0)`.
    VanillaPut { strike: f64, asset: usize },
    /// Guaranteed minimum maturity benefit; same formula as the basket put.
    Gmmb { strike: f64 },
    /// Explicit nodal values on the grid.
    Custom { values: Vec<f64> },
}

impl PayoffSpec {
    /// Pointwise value; `None` for nodal (custom) payoffs.
    pub fn at(&self, y: &[f64]) -> Option<f64> {
        let sum = || y.iter().sum::<f64>();
        match *self {
            PayoffSpec::BasketPut { strike } | PayoffSpec::Gmmb { strike } => {
                Some((strike - sum()).max(0.0))
            }
            PayoffSpec::BasketCall { strike } => Some((sum() - strike).max(0.0)),
            PayoffSpec::VanillaPut { strike, asset } => {
                y.get(asset).map(|v| (strike - v).max(0.0))
            }
            PayoffSpec::Custom { .. } => None,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            PayoffSpec::BasketPut { strike }
            | PayoffSpec::BasketCall { strike }
            | PayoffSpec::Gmmb { strike }
            | PayoffSpec::VanillaPut { strike, .. } => {
                if !(*strike > 0.0 && strike.is_finite()) {
                    return Err(Error::Domain(format!("strike must be positive, got {strike}")));
                }
                if let PayoffSpec::VanillaPut { asset, .. } = self {
                    if *asset >= n {
                        return Err(Error::Domain(format!(
                            "vanilla put refers to asset {asset} but the model has {n}"
                        )));
                    }
                }
                Ok(())
            }
            PayoffSpec::Custom { values } => {
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Domain("custom payoff has non-finite values".into()));
                }
                Ok(())
            }
        }
    }
}

/// Payoff at every grid node, zeroed on Dirichlet nodes.
pub fn evaluate_payoff(payoff: &PayoffSpec, grid: &Grid) -> Result<Vec<f64>> {
    payoff.validate(grid.n())?;
    let mut out = vec![0.0; grid.node_count()];
    if let PayoffSpec::Custom { values } = payoff {
        if values.len() != grid.node_count() {
            return Err(Error::Shape {
                what: "custom payoff",
                expected: grid.node_count(),
                got: values.len(),
            });
        }
        for &f in grid.interior_nodes() {
            out[f] = values[f];
        }
        return Ok(out);
    }
    for &f in grid.interior_nodes() {
        let y = exp_transform(&grid.node_coords(f));
        out[f] = payoff.at(&y).expect("pointwise payoff");
    }
    Ok(out)
}

/// CSV dump: log coordinates, asset coordinates, node class, payoff value.
pub fn write_grid_csv<W: Write>(grid: &Grid, payoff: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n = grid.n();
    let mut header: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
    header.extend((0..n).map(|i| format!("y{i}")));
    header.push("class".into());
    header.push("payoff".into());
    w.write_record(&header)?;
    for f in 0..grid.node_count() {
        let x = grid.node_coords(f);
        let mut rec: Vec<String> = x.iter().map(|v| format!("{v:.17e}")).collect();
        rec.extend(x.iter().map(|v| format!("{:.17e}", v.exp())));
        rec.push(match grid.classes()[f] {
            NodeClass::Interior => "interior".into(),
            NodeClass::Dirichlet => "dirichlet".into(),
        });
        rec.push(format!("{:.17e}", payoff[f]));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn log_transform_examples() {
        assert_eq!(log_transform(&[1.0, 1.0]).unwrap(), vec![0.0, 0.0]);
        let x = log_transform(&[std::f64::consts::E, std::f64::consts::E.powi(2)]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 2.0).abs() < 1e-15);
        assert!(matches!(log_transform(&[1.0, 0.0]), Err(Error::Domain(_))));
        assert!(matches!(log_transform(&[-3.0]), Err(Error::Domain(_))));
    }

    proptest! {
        #[test]
        fn exp_log_round_trip(y in prop::collection::vec(0.01f64..1000.0, 1..5)) {
            let back = exp_transform(&log_transform(&y).unwrap());
            for (a, b) in y.iter().zip(&back) {
                prop_assert!((a - b).abs() <= 1e-14 * a.max(1.0));
            }
        }

        #[test]
        fn sum_mask_is_monotone(l1 in 160.0f64..390.0, extra in 0.0f64..100.0) {
            let d1 = DomainSpec::new(vec![50.0, 50.0], vec![200.0, 200.0], Some(l1)).unwrap();
            let d2 = DomainSpec::new(vec![50.0, 50.0], vec![200.0, 200.0], Some(l1 + extra)).unwrap();
            let g1 = build_grid(&d1, &[21, 21]).unwrap();
            let g2 = build_grid(&d2, &[21, 21]).unwrap();
            for f in 0..g1.node_count() {
                if g1.classes()[f] == NodeClass::Interior {
                    prop_assert_eq!(g2.classes()[f], NodeClass::Interior);
                }
            }
        }
    }

    #[test]
    fn one_dimensional_grid() {
        let d = DomainSpec::new(vec![50.0], vec![200.0], None).unwrap();
        let g = build_grid(&d, &[5]).unwrap();
        assert_eq!(g.classes()[0], NodeClass::Dirichlet);
        assert_eq!(g.classes()[4], NodeClass::Dirichlet);
        assert_eq!(g.interior_count(), 3);
        assert_eq!(g.coord(0, 0), 50f64.ln());
        assert_eq!(g.coord(0, 4), 200f64.ln());
        assert!(matches!(build_grid(&d, &[4]), Err(Error::Domain(_))));
        assert!(matches!(build_grid(&d, &[5, 5]), Err(Error::Shape { .. })));
    }

    #[test]
    fn domain_validation() {
        assert!(DomainSpec::new(vec![0.0], vec![1.0], None).is_err());
        assert!(DomainSpec::new(vec![2.0], vec![1.0], None).is_err());
        assert!(DomainSpec::new(vec![50.0, 50.0], vec![200.0, 200.0], Some(100.0)).is_err());
        assert!(DomainSpec::new(vec![50.0], vec![200.0, 300.0], None).is_err());
    }

    #[test]
    fn sum_barrier_below_all_nodes_is_degenerate() {
        let d = DomainSpec::new(vec![50.0, 50.0], vec![200.0, 200.0], Some(101.0)).unwrap();
        assert!(matches!(build_grid(&d, &[11, 11]), Err(Error::DegenerateDomain)));
    }

    #[test]
    fn staircase_mask_matches_pointwise_scan() {
        let d = DomainSpec::new(vec![50.0, 50.0], vec![200.0, 200.0], Some(300.0)).unwrap();
        let g = build_grid(&d, &[41, 41]).unwrap();
        // brute force: recompute every node's coordinates from scratch
        let (lo, hi) = (50f64.ln(), 200f64.ln());
        let mut dirichlet = 0;
        for j in 0..41 {
            for i in 0..41 {
                let xi = if i == 40 { hi } else { lo + i as f64 * (hi - lo) / 40.0 };
                let xj = if j == 40 { hi } else { lo + j as f64 * (hi - lo) / 40.0 };
                let face = i == 0 || j == 0 || i == 40 || j == 40;
                let masked = face || xi.exp() + xj.exp() >= 300.0;
                if masked {
                    dirichlet += 1;
                }
                let expected = if masked { NodeClass::Dirichlet } else { NodeClass::Interior };
                assert_eq!(g.classes()[i + 41 * j], expected);
            }
        }
        let frac = dirichlet as f64 / (41.0 * 41.0);
        let got = (g.node_count() - g.interior_count()) as f64 / g.node_count() as f64;
        assert_eq!(frac, got);
        assert!(frac > 0.1 && frac < 0.9, "{frac}");
    }

    #[test]
    fn refinement_preserves_coarse_classification_off_the_staircase() {
        let d = DomainSpec::new(vec![50.0, 50.0], vec![200.0, 200.0], Some(300.0)).unwrap();
        let coarse = build_grid(&d, &[21, 21]).unwrap();
        let fine = build_grid(&d, &[41, 41]).unwrap();
        let band = fine.spacing()[0];
        for f in 0..coarse.node_count() {
            let idx = coarse.multi_index(f);
            let fine_flat = fine.flat_index(&[2 * idx[0], 2 * idx[1]]);
            let x = coarse.node_coords(f);
            let s: f64 = x.iter().map(|v| v.exp()).sum();
            // nodes within one fine cell of the barrier may flip
            if (s.ln() - 300f64.ln()).abs() < 2.0 * band {
                continue;
            }
            assert_eq!(coarse.classes()[f], fine.classes()[fine_flat]);
        }
    }

    #[test]
    fn payoff_examples() {
        let p = PayoffSpec::BasketPut { strike: 100.0 };
        assert_eq!(p.at(&[40.0, 30.0]), Some(30.0));
        assert_eq!(p.at(&[80.0, 60.0]), Some(0.0));
        assert_eq!(PayoffSpec::BasketCall { strike: 100.0 }.at(&[80.0, 60.0]), Some(40.0));
        assert_eq!(PayoffSpec::VanillaPut { strike: 100.0, asset: 1 }.at(&[10.0, 60.0]), Some(40.0));

        let d = DomainSpec::new(vec![20.0, 20.0], vec![200.0, 200.0], Some(250.0)).unwrap();
        let g = build_grid(&d, &[17, 17]).unwrap();
        let put = evaluate_payoff(&p, &g).unwrap();
        let gmmb = evaluate_payoff(&PayoffSpec::Gmmb { strike: 100.0 }, &g).unwrap();
        assert_eq!(put, gmmb);
        for f in 0..g.node_count() {
            assert!(put[f] >= 0.0);
            if g.classes()[f] == NodeClass::Dirichlet {
                assert_eq!(put[f], 0.0);
            }
        }
        assert!(put.iter().any(|&v| v > 0.0));
    }

    #[test]
    fn custom_payoff_shape_and_masking() {
        let d = DomainSpec::new(vec![50.0], vec![200.0], None).unwrap();
        let g = build_grid(&d, &[7]).unwrap();
        let bad = PayoffSpec::Custom { values: vec![1.0; 6] };
        assert!(matches!(evaluate_payoff(&bad, &g), Err(Error::Shape { .. })));
        let ok = evaluate_payoff(&PayoffSpec::Custom { values: vec![1.0; 7] }, &g).unwrap();
        assert_eq!(ok, vec![0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn interpolation_reproduces_linear_data() {
        let d = DomainSpec::new(vec![50.0, 60.0], vec![200.0, 180.0], None).unwrap();
        let g = build_grid(&d, &[9, 11]).unwrap();
        let full: Vec<f64> = (0..g.node_count())
            .map(|f| {
                let x = g.node_coords(f);
                2.0 * x[0] - x[1] + 0.5
            })
            .collect();
        let x = [4.3, 4.5];
        let v = g.interpolate(&full, &x).unwrap();
        assert!((v - (2.0 * 4.3 - 4.5 + 0.5)).abs() < 1e-12);
        assert!(g.interpolate(&full, &[1.0, 4.5]).is_err());
    }

    #[test]
    fn core_region_is_central_half() {
        let d = DomainSpec::new(vec![1.0], vec![std::f64::consts::E.powi(4)], None).unwrap();
        let g = build_grid(&d, &[41]).unwrap();
        let core: Vec<usize> = (0..41).filter(|&f| g.in_region(f, MeasureRegion::Core)).collect();
        assert_eq!(core.first(), Some(&10));
        assert_eq!(core.last(), Some(&30));
    }

    #[test]
    fn grid_csv_dump() {
        let d = DomainSpec::new(vec![50.0], vec![200.0], None).unwrap();
        let g = build_grid(&d, &[5]).unwrap();
        let p = evaluate_payoff(&PayoffSpec::VanillaPut { strike: 100.0, asset: 0 }, &g).unwrap();
        let mut buf = Vec::new();
        write_grid_csv(&g, &p, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.starts_with("x0,y0,class,payoff"));
    }
}
