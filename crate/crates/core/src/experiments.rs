//! Experiments measuring Harnack-type conclusions on concrete functions:
//! the three-quarter measure bound, oscillation decay with a fitted Hölder
//! exponent, dyadic coverage of `B_{1/2}` along an opening schedule, and
//! sweeps checking that measured constants do not drift with the small scale.
//!
//! Random instances are reproducible from their seed alone.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::contact::{contact_set, dyadic_cover};
use crate::error::{Error, Result};
use crate::lattice::{oscillation, GridFunction, Lattice, Region};
use crate::operators::{
    ball_interior, seeded_rng, solve_dirichlet, solve_homogenized, solve_nonlocal, DiscreteEllipticOp,
    NonlocalDiscretization, NonlocalKernel, PeriodicDegenerateCoeffs, ScalarField, SolveReport,
    SolverOptions,
};
use crate::{fmt_f64, norm};

pub mod acceptance;

/// Mixes a stream id into a seed so that independent draws never share a stream.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Instances.

/// Boundary or exterior data of a random instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataKind {
    /// `height * max(0, 1 - |x - p| / width)` with `p = radius * e`, `e` a
    /// seeded random unit vector.
    Spike {
        #[serde(default = "one")]
        height: f64,
        #[serde(default = "half")]
        width: f64,
        #[serde(default = "one")]
        radius: f64,
    },
    /// Independent uniform values per node.
    Random { lo: f64, hi: f64 },
    Field { field: ScalarField },
}

fn one() -> f64 {
    1.0
}

fn half() -> f64 {
    0.5
}

impl DataKind {
    pub fn spike() -> Self {
        DataKind::Spike {
            height: 1.0,
            width: 0.5,
            radius: 1.0,
        }
    }

    pub fn sample(&self, lat: &Lattice, seed: u64) -> Result<GridFunction> {
        match self {
            DataKind::Spike { height, width, radius } => {
                if !(*width > 0.0) {
                    return Err(Error::InvalidParameter("spike width must be positive".into()));
                }
                let mut rng = seeded_rng(derive_seed(seed, 1));
                let e = random_unit(&mut rng, lat.dim());
                let center: Vec<f64> = e.iter().map(|x| x * radius).collect();
                ScalarField::Spike {
                    center,
                    width: *width,
                    height: *height,
                }
                .sample(lat, 0)
            }
            DataKind::Random { lo, hi } => {
                ScalarField::RandomUniform { lo: *lo, hi: *hi }.sample(lat, derive_seed(seed, 2))
            }
            DataKind::Field { field } => field.sample(lat, derive_seed(seed, 3)),
        }
    }
}

fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    if dim == 2 {
        let t: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        return vec![t.cos(), t.sin()];
    }
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = norm(&v);
        if n > 1e-3 && n <= 1.0 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

fn default_dim() -> usize {
    2
}

fn default_lambda_min() -> f64 {
    1.0
}

fn default_lambda_max() -> f64 {
    10.0
}

fn default_spike() -> DataKind {
    DataKind::spike()
}

/// `sum_i lambda_i(x) u_ii = f` in `B_1` with i.i.d. uniform coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteInstance {
    #[serde(default = "default_dim")]
    pub dim: usize,
    pub spacing: f64,
    #[serde(default = "default_lambda_min")]
    pub lambda_min: f64,
    #[serde(default = "default_lambda_max")]
    pub lambda_max: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_spike")]
    pub boundary: DataKind,
    #[serde(default)]
    pub rhs: Option<DataKind>,
}

impl DiscreteInstance {
    pub fn new(spacing: f64, seed: u64) -> Self {
        Self {
            dim: 2,
            spacing,
            lambda_min: 1.0,
            lambda_max: 10.0,
            seed,
            boundary: DataKind::spike(),
            rhs: None,
        }
    }

    pub fn solve(&self, opts: &SolverOptions) -> Result<(GridFunction, SolveReport)> {
        let lat = Lattice::centered(self.dim, self.spacing, 1.0)?;
        let op = DiscreteEllipticOp::random(&lat, self.lambda_min, self.lambda_max, derive_seed(self.seed, 10))?;
        let g = self.boundary.sample(&lat, self.seed)?;
        let f = match &self.rhs {
            Some(k) => k.sample(&lat, derive_seed(self.seed, 11))?,
            None => GridFunction::constant(&lat, 0.0)?,
        };
        solve_dirichlet(&op, &ball_interior(&lat, 1.0), &g, &f, opts)
    }
}

fn default_per_period() -> usize {
    4
}

/// `a^{ij}(x/eps) u_ij = 0` in `B_1` with degenerate periodic coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomogenizedInstance {
    #[serde(default = "default_dim")]
    pub dim: usize,
    pub coefficients: PeriodicDegenerateCoeffs,
    /// Lattice nodes per period; the spacing is `epsilon / nodes_per_period`.
    #[serde(default = "default_per_period")]
    pub nodes_per_period: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_spike")]
    pub boundary: DataKind,
}

impl HomogenizedInstance {
    pub fn new(epsilon: f64, seed: u64) -> Self {
        Self {
            dim: 2,
            coefficients: PeriodicDegenerateCoeffs::new(epsilon, 10.0),
            nodes_per_period: 4,
            seed,
            boundary: DataKind::spike(),
        }
    }

    pub fn spacing(&self) -> f64 {
        self.coefficients.epsilon / self.nodes_per_period as f64
    }

    pub fn solve(&self, opts: &SolverOptions) -> Result<(GridFunction, SolveReport)> {
        if self.nodes_per_period == 0 {
            return Err(Error::InvalidParameter("nodes_per_period must be positive".into()));
        }
        let lat = Lattice::centered(self.dim, self.spacing(), 1.0)?;
        let g = self.boundary.sample(&lat, self.seed)?;
        let f = GridFunction::constant(&lat, 0.0)?;
        solve_homogenized(&self.coefficients, &lat, &ball_interior(&lat, 1.0), &g, &f, opts)
    }
}

fn default_exterior() -> DataKind {
    DataKind::Spike {
        height: 1.0,
        width: 0.5,
        radius: 1.5,
    }
}

/// `L u = f` in `B_1` for a nonlocal kernel, data on `B_2 \ B_1`, zero beyond.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonlocalInstance {
    #[serde(default = "default_dim")]
    pub dim: usize,
    pub spacing: f64,
    pub kernel: NonlocalKernel,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_exterior")]
    pub exterior: DataKind,
    #[serde(default)]
    pub rhs: Option<DataKind>,
}

impl NonlocalInstance {
    pub fn new(sigma: f64, spacing: f64, seed: u64) -> Self {
        Self {
            dim: 2,
            spacing,
            kernel: NonlocalKernel {
                sigma,
                lambda_min: 1.0,
                lambda_max: 2.0,
                anisotropy: 0.2,
                modulation: crate::operators::KernelModulation::Random {
                    seed: derive_seed(seed, 20),
                },
            },
            seed,
            exterior: default_exterior(),
            rhs: None,
        }
    }

    pub fn lattice(&self) -> Result<Lattice> {
        Lattice::centered(self.dim, self.spacing, crate::operators::EXTERIOR_RADIUS)
    }

    pub fn solve(&self, opts: &SolverOptions) -> Result<(GridFunction, SolveReport)> {
        let lat = self.lattice()?;
        let disc = NonlocalDiscretization::new(&self.kernel, &lat)?;
        let g = self.exterior.sample(&lat, self.seed)?;
        let f = match &self.rhs {
            Some(k) => k.sample(&lat, derive_seed(self.seed, 21))?,
            None => GridFunction::constant(&lat, 0.0)?,
        };
        solve_nonlocal(&disc, &g, &f, opts)
    }
}

/// Restriction of `u` to the lattice of `[-1, 1]^n` with the same spacing.
pub fn restrict_to_unit_box(u: &GridFunction) -> Result<GridFunction> {
    let lat = u.lattice();
    let unit = Lattice::centered(lat.dim(), lat.spacing(), 1.0)?;
    let mut values = Vec::with_capacity(unit.len());
    for i in 0..unit.len() {
        let j = lat
            .node_at(&unit.point(i))
            .ok_or_else(|| Error::GridMismatch("unit box is not a sublattice".into()))?;
        values.push(u.value(j));
    }
    GridFunction::new(unit, values)
}

/// Divides `u` by its minimum over `B_{1/2}` when that minimum is positive,
/// so that `min_{B_{1/2}} u = 1`. Returns the divisor (1 when unchanged).
pub fn normalize_by_min(u: &GridFunction) -> Result<(GridFunction, f64)> {
    let m = min_over(u, &Region::ball0(u.lattice().dim(), 0.5))?;
    if m > 0.0 {
        Ok((u.affine(1.0 / m, 0.0), m))
    } else {
        Ok((u.clone(), 1.0))
    }
}

fn min_over(u: &GridFunction, region: &Region) -> Result<f64> {
    let mut m = f64::INFINITY;
    u.lattice().for_each_in(region, |i, _| m = m.min(u.value(i)));
    if m == f64::INFINITY {
        return Err(Error::EmptyRegion(format!("{region:?}")));
    }
    Ok(m)
}

fn require_nonnegative(u: &GridFunction) -> Result<()> {
    if let Some((i, &v)) = u.values().iter().enumerate().find(|(_, &v)| v < 0.0) {
        return Err(Error::NegativeValue { node: i, value: v });
    }
    Ok(())
}

fn require_small_somewhere(u: &GridFunction) -> Result<f64> {
    let m = min_over(u, &Region::ball0(u.lattice().dim(), 0.5))?;
    if m > 1.0 {
        return Err(Error::Hypothesis(format!(
            "min over B_1/2 is {m}; the hypothesis needs a point with u <= 1"
        )));
    }
    Ok(m)
}

// ---------------------------------------------------------------------------
// Weak Harnack.

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeakHarnackResult {
    pub threshold: f64,
    pub fraction: f64,
    pub pass: bool,
    /// Least `K` with `|{u <= K} cap B_{1/2}| >= (3/4)|B_{1/2}|`.
    pub smallest_k: f64,
    pub min_half: f64,
    pub nodes: usize,
}

/// Fraction of `B_{1/2}` where `u <= threshold`, against the 3/4 target.
pub fn weak_harnack_check(u: &GridFunction, threshold: f64) -> Result<WeakHarnackResult> {
    require_nonnegative(u)?;
    let min_half = require_small_somewhere(u)?;
    let region = Region::ball0(u.lattice().dim(), 0.5);
    let mut vals = Vec::new();
    u.lattice().for_each_in(&region, |i, _| vals.push(u.value(i)));
    let count = vals.iter().filter(|&&v| v <= threshold).count();
    let fraction = count as f64 / vals.len() as f64;
    vals.sort_by(f64::total_cmp);
    let need = ((0.75 * vals.len() as f64) - 1e-9).ceil() as usize;
    let smallest_k = vals[need.max(1) - 1];
    Ok(WeakHarnackResult {
        threshold,
        fraction,
        pass: fraction >= 0.75,
        smallest_k,
        min_half,
        nodes: vals.len(),
    })
}

// ---------------------------------------------------------------------------
// Oscillation decay.

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayLevel {
    pub k: u32,
    pub radius: f64,
    pub oscillation: f64,
    /// `osc_k / osc_{k-1}`.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayResult {
    pub center: Vec<f64>,
    pub levels: Vec<DecayLevel>,
    /// Least-squares slope of `log2 osc` against `-k`.
    pub exponent: Option<f64>,
    pub truncated: bool,
    pub warnings: Vec<String>,
}

/// Oscillations over `B_{2^-k}(center)`, `k = 1..k_max`, keeping radii of at
/// least four spacings and at least `min_radius`.
pub fn oscillation_decay_check(
    u: &GridFunction,
    center: &[f64],
    k_max: u32,
    min_radius: f64,
) -> Result<DecayResult> {
    let lat = u.lattice();
    if center.len() != lat.dim() {
        return Err(Error::InvalidParameter("center dimension mismatch".into()));
    }
    if k_max == 0 {
        return Err(Error::InvalidParameter("k_max must be at least 1".into()));
    }
    if norm(center) + 0.5 > 1.0 + 1e-12 {
        return Err(Error::InvalidParameter(format!(
            "B_1/2({center:?}) leaves the unit ball"
        )));
    }
    let floor = (4.0 * lat.spacing()).max(min_radius);
    let mut levels: Vec<DecayLevel> = Vec::new();
    let mut warnings = Vec::new();
    let mut truncated = false;
    for k in 1..=k_max {
        let radius = 0.5f64.powi(k as i32);
        if radius < floor * (1.0 - 1e-12) {
            truncated = true;
            warnings.push(format!(
                "levels k >= {k} skipped: radius {} below the resolved floor {floor}",
                fmt_f64(radius)
            ));
            break;
        }
        let osc = oscillation(u, &Region::ball(center, radius))?;
        let ratio = levels
            .last()
            .and_then(|l| (l.oscillation > 0.0).then(|| osc / l.oscillation));
        levels.push(DecayLevel {
            k,
            radius,
            oscillation: osc,
            ratio,
        });
    }
    let pts: Vec<(f64, f64)> = levels
        .iter()
        .filter(|l| l.oscillation > 0.0)
        .map(|l| (-(l.k as f64), l.oscillation.log2()))
        .collect();
    let exponent = if pts.len() >= 2 {
        Some(least_squares_slope(&pts))
    } else {
        warnings.push("fewer than two levels with positive oscillation; no exponent".into());
        None
    };
    Ok(DecayResult {
        center: center.to_vec(),
        levels,
        exponent,
        truncated,
        warnings,
    })
}

pub fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

// ---------------------------------------------------------------------------
// Coverage.

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageStep {
    pub opening: f64,
    pub contacts: usize,
    pub cubes: usize,
    /// Fraction of the nodes of `B_{1/2}` inside the dyadic cover.
    pub fraction: f64,
    pub gain: Option<f64>,
    /// `1 - (1 - f_k) / (1 - f_{k-1})`, the relative shrinkage of the uncovered part.
    pub eta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageResult {
    pub level: u32,
    pub mu: f64,
    pub target: f64,
    pub steps: Vec<CoverageStep>,
    /// First opening whose cover reaches `1 - mu`.
    pub empirical_c: Option<f64>,
    pub achieved: f64,
    pub pass: bool,
}

/// Openings `start * ratio^k`, `k = 0..count`.
pub fn opening_schedule(start: f64, ratio: f64, count: usize) -> Vec<f64> {
    (0..count).map(|k| start * ratio.powi(k as i32)).collect()
}

/// Dyadic cover of `A_a(u)` at `level` for each opening of the schedule.
pub fn coverage_check(
    u: &GridFunction,
    schedule: &[f64],
    level: u32,
    mu: f64,
    vertices: &[Vec<f64>],
) -> Result<CoverageResult> {
    if schedule.is_empty() {
        return Err(Error::InvalidParameter("opening schedule is empty".into()));
    }
    if !(mu > 0.0 && mu < 1.0) {
        return Err(Error::InvalidParameter(format!("mu must lie in (0, 1), got {mu}")));
    }
    require_nonnegative(u)?;
    require_small_somewhere(u)?;
    let lat = u.lattice();
    let half = Region::ball0(lat.dim(), 0.5);
    let target = 1.0 - mu;
    let mut steps: Vec<CoverageStep> = Vec::new();
    let mut empirical_c = None;
    for &a in schedule {
        let set = contact_set(u, a, vertices)?;
        let cover = dyadic_cover(&set, lat, level)?;
        let fraction = cover.fraction_in(lat, &half)?;
        let (gain, eta) = match steps.last() {
            Some(prev) => {
                let eta = (prev.fraction < 1.0).then(|| 1.0 - (1.0 - fraction) / (1.0 - prev.fraction));
                (Some(fraction - prev.fraction), eta)
            }
            None => (None, None),
        };
        steps.push(CoverageStep {
            opening: a,
            contacts: set.nodes().len(),
            cubes: cover.cubes.len(),
            fraction,
            gain,
            eta,
        });
        if fraction >= target {
            empirical_c = Some(a);
            break;
        }
    }
    let achieved = steps.iter().map(|s| s.fraction).fold(0.0, f64::max);
    Ok(CoverageResult {
        level,
        mu,
        target,
        steps,
        empirical_c,
        achieved,
        pass: empirical_c.is_some(),
    })
}

// ---------------------------------------------------------------------------
// Sweeps.

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub ok: bool,
    pub error: Option<String>,
    pub measured: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub parameter: String,
    pub tracked: String,
    pub rows: Vec<SweepRow>,
    /// max / min of the tracked quantity over successful rows.
    pub ratio: Option<f64>,
    pub bound: f64,
    pub pass: bool,
}

/// Runs `experiment` for every sweep value (rows may run in parallel; the
/// table keeps sweep order). Uniform iff every row succeeds, the tracked
/// quantity is positive, and its max/min ratio is within `bound`.
pub fn uniformity_sweep<F>(parameter: &str, values: &[f64], tracked: &str, bound: f64, experiment: F) -> SweepResult
where
    F: Fn(f64) -> Result<BTreeMap<String, f64>> + Sync,
{
    use rayon::prelude::*;
    let rows: Vec<SweepRow> = values
        .par_iter()
        .map(|&v| match experiment(v) {
            Ok(measured) => SweepRow {
                value: v,
                ok: true,
                error: None,
                measured,
            },
            Err(e) => SweepRow {
                value: v,
                ok: false,
                error: Some(e.to_string()),
                measured: BTreeMap::new(),
            },
        })
        .collect();
    let tracked_vals: Vec<f64> = rows
        .iter()
        .filter(|r| r.ok)
        .filter_map(|r| r.measured.get(tracked).copied())
        .collect();
    let all_ok = rows.iter().all(|r| r.ok) && tracked_vals.len() == rows.len();
    let positive = tracked_vals.iter().all(|&v| v > 0.0);
    let ratio = if tracked_vals.is_empty() || !positive {
        None
    } else {
        let hi = tracked_vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = tracked_vals.iter().cloned().fold(f64::INFINITY, f64::min);
        Some(hi / lo)
    };
    let pass = all_ok && positive && ratio.is_some_and(|r| r <= bound);
    SweepResult {
        parameter: parameter.into(),
        tracked: tracked.into(),
        rows,
        ratio,
        bound,
        pass,
    }
}

/// Exponent and weak-Harnack constant of one solved function.
pub fn profile_solution(u: &GridFunction, min_radius: f64) -> Result<BTreeMap<String, f64>> {
    let unit = if u.lattice().box_spec().half_widths.iter().any(|&w| w > 1.0) {
        restrict_to_unit_box(u)?
    } else {
        u.clone()
    };
    let center = vec![0.0; unit.lattice().dim()];
    let decay = oscillation_decay_check(&unit, &center, 12, min_radius)?;
    let exponent = decay
        .exponent
        .ok_or_else(|| Error::Unresolved("no exponent could be fitted".into()))?;
    let (norm_u, _) = normalize_by_min(&unit)?;
    let wh = weak_harnack_check(&norm_u, f64::INFINITY)?;
    let mut out = BTreeMap::new();
    out.insert("exponent".into(), exponent);
    out.insert("K".into(), wh.smallest_k);
    out.insert("levels".into(), decay.levels.len() as f64);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Reports.

/// Plot-ready table; cells are JSON scalars, written to CSV with the
/// shortest round-trip float formatting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(csv_cell).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

fn csv_cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::Bool(b) => b.to_string(),
        Value::Number(n) => match (n.as_i64(), n.as_u64(), n.as_f64()) {
            (Some(i), _, _) => i.to_string(),
            (_, Some(u), _) => u.to_string(),
            (_, _, Some(f)) => fmt_f64(f),
            _ => n.to_string(),
        },
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// `f64` as a JSON value; non-finite values become `null`.
pub fn num(x: f64) -> Value {
    serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub id: String,
    pub pass: bool,
    pub instance: Value,
    pub measured: Value,
    pub thresholds: Value,
    pub warnings: Vec<String>,
    pub table: Table,
    /// Wall-clock seconds; only filled when timings are requested.
    pub runtime_s: Option<f64>,
}

// ---------------------------------------------------------------------------
// Experiment configurations.

/// Where the function under study comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FunctionSource {
    Field {
        dim: usize,
        spacing: f64,
        field: ScalarField,
    },
    Discrete {
        instance: DiscreteInstance,
    },
    Homogenized {
        instance: HomogenizedInstance,
    },
    Nonlocal {
        instance: NonlocalInstance,
    },
}

impl FunctionSource {
    pub fn set_seed(&mut self, seed: u64) {
        match self {
            FunctionSource::Field { .. } => {}
            FunctionSource::Discrete { instance } => instance.seed = seed,
            FunctionSource::Homogenized { instance } => instance.seed = seed,
            FunctionSource::Nonlocal { instance } => {
                instance.seed = seed;
                if let crate::operators::KernelModulation::Random { seed: s } = &mut instance.kernel.modulation {
                    *s = derive_seed(seed, 20);
                }
            }
        }
    }

    /// The function on the lattice of `[-1, 1]^n`, and the smallest radius
    /// at which decay is meaningful (the period for homogenization).
    pub fn realize(&self, opts: &SolverOptions) -> Result<(GridFunction, f64)> {
        match self {
            FunctionSource::Field { dim, spacing, field } => {
                let lat = Lattice::centered(*dim, *spacing, 1.0)?;
                Ok((field.sample(&lat, 0)?, 0.0))
            }
            FunctionSource::Discrete { instance } => Ok((instance.solve(opts)?.0, 0.0)),
            FunctionSource::Homogenized { instance } => {
                Ok((instance.solve(opts)?.0, instance.coefficients.epsilon))
            }
            FunctionSource::Nonlocal { instance } => Ok((restrict_to_unit_box(&instance.solve(opts)?.0)?, 0.0)),
        }
    }
}

fn default_threshold() -> f64 {
    2.0
}

fn default_schedule() -> Vec<f64> {
    vec![1.0, 2.0, 4.0, 8.0]
}

fn default_mu() -> f64 {
    0.125
}

fn default_kmax() -> u32 {
    8
}

fn default_level() -> u32 {
    2
}

fn default_bound() -> f64 {
    1.5
}

fn default_tracked() -> String {
    "exponent".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExperimentSpec {
    WeakHarnack {
        source: FunctionSource,
        #[serde(default = "default_threshold")]
        threshold: f64,
        /// Divide by the minimum over `B_{1/2}` first.
        #[serde(default = "yes")]
        normalize: bool,
    },
    OscillationDecay {
        source: FunctionSource,
        #[serde(default)]
        center: Option<Vec<f64>>,
        #[serde(default = "default_kmax")]
        k_max: u32,
        #[serde(default)]
        min_radius: Option<f64>,
    },
    Coverage {
        source: FunctionSource,
        #[serde(default = "default_schedule")]
        schedule: Vec<f64>,
        #[serde(default = "default_level")]
        level: u32,
        #[serde(default = "default_mu")]
        mu: f64,
        #[serde(default = "yes")]
        normalize: bool,
    },
    /// One row per sigma on copies of the template instance.
    SigmaSweep {
        template: NonlocalInstance,
        values: Vec<f64>,
        #[serde(default = "default_tracked")]
        tracked: String,
        #[serde(default = "default_bound")]
        bound: f64,
    },
    /// One row per epsilon: lattice spacing for discrete templates, period
    /// for homogenized ones.
    EpsilonSweep {
        template: FunctionSource,
        values: Vec<f64>,
        #[serde(default = "default_tracked")]
        tracked: String,
        #[serde(default = "default_bound")]
        bound: f64,
    },
    Acceptance {
        #[serde(default)]
        criteria: Option<Vec<u32>>,
    },
}

fn yes() -> bool {
    true
}

impl ExperimentSpec {
    pub fn id(&self) -> &'static str {
        match self {
            ExperimentSpec::WeakHarnack { .. } => "weak_harnack",
            ExperimentSpec::OscillationDecay { .. } => "oscillation_decay",
            ExperimentSpec::Coverage { .. } => "coverage",
            ExperimentSpec::SigmaSweep { .. } => "sigma_sweep",
            ExperimentSpec::EpsilonSweep { .. } => "epsilon_sweep",
            ExperimentSpec::Acceptance { .. } => "acceptance",
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            ExperimentSpec::WeakHarnack { source, .. }
            | ExperimentSpec::OscillationDecay { source, .. }
            | ExperimentSpec::Coverage { source, .. } => source.set_seed(seed),
            ExperimentSpec::SigmaSweep { template, .. } => {
                let mut s = FunctionSource::Nonlocal { instance: template.clone() };
                s.set_seed(seed);
                if let FunctionSource::Nonlocal { instance } = s {
                    *template = instance;
                }
            }
            ExperimentSpec::EpsilonSweep { template, .. } => template.set_seed(seed),
            ExperimentSpec::Acceptance { .. } => {}
        }
    }
}

fn sweep_source(template: &FunctionSource, eps: f64) -> Result<FunctionSource> {
    let mut s = template.clone();
    match &mut s {
        FunctionSource::Discrete { instance } => instance.spacing = eps,
        FunctionSource::Homogenized { instance } => instance.coefficients.epsilon = eps,
        FunctionSource::Field { spacing, .. } => *spacing = eps,
        FunctionSource::Nonlocal { instance } => instance.spacing = eps,
    }
    Ok(s)
}

fn sweep_report(id: &str, instance: Value, sweep: SweepResult, timings: bool, column: &str) -> ExperimentReport {
    let rows = sweep
        .rows
        .iter()
        .map(|r| {
            vec![
                num(r.value),
                r.measured.get("exponent").map_or(Value::Null, |&v| num(v)),
                r.measured.get("K").map_or(Value::Null, |&v| num(v)),
                if timings {
                    r.measured.get("runtime_s").map_or(Value::Null, |&v| num(v))
                } else {
                    Value::Null
                },
            ]
        })
        .collect();
    let mut warnings = Vec::new();
    for r in &sweep.rows {
        if let Some(e) = &r.error {
            warnings.push(format!("{column} = {}: {e}", fmt_f64(r.value)));
        }
    }
    let mut measured = serde_json::to_value(&sweep).unwrap_or(Value::Null);
    if !timings {
        strip_runtime(&mut measured);
    }
    ExperimentReport {
        id: id.into(),
        pass: sweep.pass,
        instance,
        measured,
        thresholds: json!({ "max_over_min": sweep.bound, "tracked": sweep.tracked }),
        warnings,
        table: Table {
            columns: vec![column.into(), "exponent".into(), "K".into(), "runtime_s".into()],
            rows,
        },
        runtime_s: None,
    }
}

fn strip_runtime(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.remove("runtime_s");
            for (_, x) in map.iter_mut() {
                strip_runtime(x);
            }
        }
        Value::Array(xs) => xs.iter_mut().for_each(strip_runtime),
        _ => {}
    }
}

fn timed_profile(source: &FunctionSource, opts: &SolverOptions) -> Result<BTreeMap<String, f64>> {
    let start = Instant::now();
    let (u, min_radius) = source.realize(opts)?;
    let mut m = profile_solution(&u, min_radius)?;
    m.insert("runtime_s".into(), start.elapsed().as_secs_f64());
    Ok(m)
}

/// Runs one configured experiment.
pub fn run_experiment(spec: &ExperimentSpec, opts: &SolverOptions, timings: bool) -> Result<ExperimentReport> {
    let start = Instant::now();
    let mut report = match spec {
        ExperimentSpec::WeakHarnack {
            source,
            threshold,
            normalize,
        } => {
            let (u, _) = source.realize(opts)?;
            let (u, divisor) = if *normalize { normalize_by_min(&u)? } else { (u, 1.0) };
            let r = weak_harnack_check(&u, *threshold)?;
            ExperimentReport {
                id: spec.id().into(),
                pass: r.pass,
                instance: serde_json::to_value(source)?,
                measured: json!({
                    "fraction": num(r.fraction),
                    "smallest_k": num(r.smallest_k),
                    "min_half": num(r.min_half),
                    "divisor": num(divisor),
                    "nodes": r.nodes,
                }),
                thresholds: json!({ "K": num(*threshold), "fraction": 0.75 }),
                warnings: Vec::new(),
                table: Table {
                    columns: vec!["threshold".into(), "fraction".into(), "smallest_k".into(), "pass".into()],
                    rows: vec![vec![num(*threshold), num(r.fraction), num(r.smallest_k), Value::Bool(r.pass)]],
                },
                runtime_s: None,
            }
        }
        ExperimentSpec::OscillationDecay {
            source,
            center,
            k_max,
            min_radius,
        } => {
            let (u, floor) = source.realize(opts)?;
            let c = center.clone().unwrap_or_else(|| vec![0.0; u.lattice().dim()]);
            let r = oscillation_decay_check(&u, &c, *k_max, min_radius.unwrap_or(floor))?;
            ExperimentReport {
                id: spec.id().into(),
                pass: r.exponent.is_some_and(|g| g > 0.0),
                instance: serde_json::to_value(source)?,
                measured: json!({
                    "exponent": r.exponent.map_or(Value::Null, num),
                    "levels": r.levels.len(),
                    "truncated": r.truncated,
                }),
                thresholds: json!({ "exponent_positive": true }),
                warnings: r.warnings.clone(),
                table: Table {
                    columns: vec!["k".into(), "radius".into(), "oscillation".into(), "ratio".into()],
                    rows: r
                        .levels
                        .iter()
                        .map(|l| vec![json!(l.k), num(l.radius), num(l.oscillation), l.ratio.map_or(Value::Null, num)])
                        .collect(),
                },
                runtime_s: None,
            }
        }
        ExperimentSpec::Coverage {
            source,
            schedule,
            level,
            mu,
            normalize,
        } => {
            let (u, _) = source.realize(opts)?;
            let (u, _) = if *normalize { normalize_by_min(&u)? } else { (u, 1.0) };
            let vertices = crate::contact::lattice_vertices(u.lattice(), crate::contact::ADMISSIBLE_RADIUS);
            let r = coverage_check(&u, schedule, *level, *mu, &vertices)?;
            let mut warnings = Vec::new();
            if !r.pass {
                warnings.push(format!(
                    "schedule exhausted below 1 - mu; achieved fraction {}",
                    fmt_f64(r.achieved)
                ));
            }
            ExperimentReport {
                id: spec.id().into(),
                pass: r.pass,
                instance: serde_json::to_value(source)?,
                measured: json!({
                    "empirical_c": r.empirical_c.map_or(Value::Null, num),
                    "achieved": num(r.achieved),
                    "level": r.level,
                }),
                thresholds: json!({ "target": num(r.target) }),
                warnings,
                table: Table {
                    columns: vec![
                        "opening".into(),
                        "contacts".into(),
                        "cubes".into(),
                        "fraction".into(),
                        "gain".into(),
                        "eta".into(),
                    ],
                    rows: r
                        .steps
                        .iter()
                        .map(|s| {
                            vec![
                                num(s.opening),
                                json!(s.contacts),
                                json!(s.cubes),
                                num(s.fraction),
                                s.gain.map_or(Value::Null, num),
                                s.eta.map_or(Value::Null, num),
                            ]
                        })
                        .collect(),
                },
                runtime_s: None,
            }
        }
        ExperimentSpec::SigmaSweep {
            template,
            values,
            tracked,
            bound,
        } => {
            let sweep = uniformity_sweep("sigma", values, tracked, *bound, |sigma| {
                let mut inst = template.clone();
                inst.kernel.sigma = sigma;
                timed_profile(&FunctionSource::Nonlocal { instance: inst }, opts)
            });
            sweep_report(spec.id(), serde_json::to_value(template)?, sweep, timings, "sigma")
        }
        ExperimentSpec::EpsilonSweep {
            template,
            values,
            tracked,
            bound,
        } => {
            let sweep = uniformity_sweep("epsilon", values, tracked, *bound, |eps| {
                timed_profile(&sweep_source(template, eps)?, opts)
            });
            sweep_report(spec.id(), serde_json::to_value(template)?, sweep, timings, "epsilon")
        }
        ExperimentSpec::Acceptance { criteria } => {
            let outcomes = acceptance::run(criteria.as_deref())?;
            let pass = outcomes.iter().all(|o| o.pass);
            let rows = outcomes
                .iter()
                .map(|o| {
                    vec![
                        json!(o.id),
                        Value::String(o.title.clone()),
                        Value::Bool(o.pass),
                        Value::String(o.summary.clone()),
                        if timings { num(o.runtime_s) } else { Value::Null },
                    ]
                })
                .collect();
            let mut measured = serde_json::to_value(&outcomes)?;
            if !timings {
                strip_runtime(&mut measured);
            }
            ExperimentReport {
                id: spec.id().into(),
                pass,
                instance: json!({ "criteria": criteria }),
                measured,
                thresholds: Value::Null,
                warnings: Vec::new(),
                table: Table {
                    columns: vec!["id".into(), "title".into(), "pass".into(), "summary".into(), "runtime_s".into()],
                    rows,
                },
                runtime_s: None,
            }
        }
    };
    if timings {
        report.runtime_s = Some(start.elapsed().as_secs_f64());
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lat(h: f64) -> Lattice {
        Lattice::centered(2, h, 1.0).unwrap()
    }

    #[test]
    fn zero_function_weak_harnack() {
        let u = GridFunction::constant(&lat(0.0625), 0.0).unwrap();
        let r = weak_harnack_check(&u, 0.0).unwrap();
        assert_eq!(r.fraction, 1.0);
        assert!(r.pass);
        assert_eq!(r.smallest_k, 0.0);
    }

    #[test]
    fn tall_plateau_blocks_weak_harnack() {
        let l = lat(0.03125);
        // u = 1 at the center, 1e6 on roughly 40% of B_1/2, small elsewhere
        let u = GridFunction::from_fn(&l, |p| {
            if p[0] == 0.0 && p[1] == 0.0 {
                1.0
            } else if p[0] > 0.12 {
                1e6
            } else {
                0.5
            }
        })
        .unwrap();
        let r = weak_harnack_check(&u, 1e6 - 1.0).unwrap();
        assert!(!r.pass);
        assert!(r.fraction < 0.75);
        assert_eq!(weak_harnack_check(&u, 1e6).unwrap().pass, true);
        assert_eq!(r.smallest_k, 1e6);
    }

    #[test]
    fn weak_harnack_hypothesis() {
        let u = GridFunction::constant(&lat(0.0625), 2.0).unwrap();
        assert!(matches!(weak_harnack_check(&u, 3.0), Err(Error::Hypothesis(_))));
    }

    #[test]
    fn analytic_exponents() {
        let l = lat(0.5f64.powi(7));
        let x1 = GridFunction::from_fn(&l, |p| p[0]).unwrap();
        let r = oscillation_decay_check(&x1, &[0.0, 0.0], 5, 0.0).unwrap();
        assert!((r.exponent.unwrap() - 1.0).abs() < 1e-12);
        let sq = GridFunction::from_fn(&l, |p| p[0].abs().sqrt()).unwrap();
        let r = oscillation_decay_check(&sq, &[0.0, 0.0], 5, 0.0).unwrap();
        assert!((r.exponent.unwrap() - 0.5).abs() < 1e-12);
        let r = oscillation_decay_check(&sq, &[0.0, 0.0], 12, 0.0).unwrap();
        assert!(r.truncated);
        assert_eq!(r.levels.len(), 5);
    }

    #[test]
    fn quadratic_coverage_schedule() {
        let l = lat(0.5f64.powi(6));
        let u = GridFunction::from_fn(&l, |p| p[0] * p[0] + p[1] * p[1]).unwrap();
        let v = crate::contact::lattice_vertices(&l, 0.75);
        let r = coverage_check(&u, &default_schedule(), 2, 0.125, &v).unwrap();
        assert_eq!(r.empirical_c, Some(4.0));
        for w in r.steps.windows(2) {
            assert!(w[1].fraction >= w[0].fraction);
        }
    }

    #[test]
    fn zero_function_coverage() {
        let l = lat(0.0625);
        let u = GridFunction::constant(&l, 0.0).unwrap();
        let v = crate::contact::lattice_vertices(&l, 0.75);
        let r = coverage_check(&u, &default_schedule(), 2, 0.125, &v).unwrap();
        assert_eq!(r.steps.len(), 1);
        assert_eq!(r.steps[0].fraction, 1.0);
    }

    #[test]
    fn sweep_shape_and_failures() {
        let s = uniformity_sweep("epsilon", &[0.5, 0.25, 0.125, 0.0625], "q", 2.0, |e| {
            if e < 0.1 {
                Err(Error::Unresolved("too fine".into()))
            } else {
                Ok(BTreeMap::from([("q".to_string(), 1.0 + e)]))
            }
        });
        assert_eq!(s.rows.len(), 4);
        assert!(!s.rows[3].ok);
        assert!(!s.pass);
        assert!((s.ratio.unwrap() - 1.5 / 1.125).abs() < 1e-15);
    }

    #[test]
    fn seeds_reproduce() {
        let a = DiscreteInstance::new(0.125, 3).solve(&SolverOptions::default()).unwrap().0;
        let b = DiscreteInstance::new(0.125, 3).solve(&SolverOptions::default()).unwrap().0;
        assert_eq!(a, b);
        let c = DiscreteInstance::new(0.125, 4).solve(&SolverOptions::default()).unwrap().0;
        assert_ne!(a, c);
    }

    #[test]
    fn csv_cells() {
        let t = Table {
            columns: vec!["a".into(), "b".into()],
            rows: vec![vec![num(0.1), Value::Null], vec![json!(3), Value::Bool(true)]],
        };
        assert_eq!(t.to_csv(), "a,b\n0.1,\n3,true\n");
    }
}
