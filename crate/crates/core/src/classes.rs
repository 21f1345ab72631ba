//! Membership checks for the supersolution classes `P_Lambda^I(r)` and the
//! weak-Harnack classes `W_M^a(rho)`.
//!
//! The local form tests every admissible center against
//! `a [(Lambda/2)((x-x0).xi)^2 - |x-x0|^2/2 + b.(x-x0) + d]` with `d` fixed by
//! matching `u(x0)`; the global form only tests contact points, against the
//! touching paraboloid plus `a (Lambda/2)((x-x0).xi)^2` on `B_r(x0)`.
//! The weak-Harnack forms count the nodes of `B_rho(x0)` below a threshold.
//!
//! Checks are sampled: directions, linear parts and openings come from
//! finite samples, so a pass means "no witness among the samples".

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contact::{touch_domain, ContactSet, Paraboloid, DEFAULT_TOUCH_K};
use crate::error::{Error, Result};
use crate::lattice::{GridFunction, Lattice, Region};
use crate::norm;

/// `a [(Lambda/2)((x-x0).xi)^2 - |x-x0|^2/2 + b.(x-x0) + d]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambdaPolynomial {
    pub lambda: f64,
    pub direction: Vec<f64>,
    pub b: Vec<f64>,
    pub d: f64,
    pub scale: f64,
    pub center: Vec<f64>,
}

impl LambdaPolynomial {
    pub fn new(
        lambda: f64,
        direction: Vec<f64>,
        b: Vec<f64>,
        d: f64,
        scale: f64,
        center: Vec<f64>,
    ) -> Result<Self> {
        if !(lambda > 0.0) || !(scale > 0.0) {
            return Err(Error::InvalidParameter("Lambda and a must be positive".into()));
        }
        if (norm(&direction) - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "direction must be a unit vector, |xi| = {}",
                norm(&direction)
            )));
        }
        if norm(&b) > 1.0 + 1e-12 || d.abs() > 1.0 + 1e-12 {
            return Err(Error::InvalidParameter("need |b| <= 1 and |d| <= 1".into()));
        }
        if direction.len() != center.len() || b.len() != center.len() {
            return Err(Error::InvalidParameter("dimension mismatch".into()));
        }
        Ok(Self {
            lambda,
            direction,
            b,
            d,
            scale,
            center,
        })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut along = 0.0;
        let mut sq = 0.0;
        let mut lin = 0.0;
        for i in 0..x.len() {
            let v = x[i] - self.center[i];
            along += v * self.direction[i];
            sq += v * v;
            lin += self.b[i] * v;
        }
        self.scale * (0.5 * self.lambda * along * along - 0.5 * sq + lin + self.d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassParams {
    pub lambda: f64,
    /// Interval `I = [a_lo, a_hi]` of sizes for `P_Lambda^I(r)`.
    pub a_lo: f64,
    pub a_hi: f64,
    pub r: f64,
    /// Weak-Harnack threshold multiplier `M`, size `a` and radius `rho`.
    #[serde(default = "default_m")]
    pub m: f64,
    #[serde(default = "default_a")]
    pub a: f64,
    #[serde(default)]
    pub rho: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_touch_k")]
    pub touch_k: f64,
    /// Functions live on `B_domain_radius`.
    #[serde(default = "default_domain_radius")]
    pub domain_radius: f64,
    #[serde(default = "default_max_witnesses")]
    pub max_witnesses: usize,
}

fn default_m() -> f64 {
    2.0
}

fn default_a() -> f64 {
    1.0
}

fn default_delta() -> f64 {
    0.05
}

fn default_touch_k() -> f64 {
    DEFAULT_TOUCH_K
}

fn default_domain_radius() -> f64 {
    1.0
}

fn default_max_witnesses() -> usize {
    1000
}

impl ClassParams {
    pub fn new(lambda: f64, a_lo: f64, a_hi: f64, r: f64) -> Self {
        Self {
            lambda,
            a_lo,
            a_hi,
            r,
            m: default_m(),
            a: default_a(),
            rho: r,
            delta: default_delta(),
            touch_k: default_touch_k(),
            domain_radius: default_domain_radius(),
            max_witnesses: default_max_witnesses(),
        }
    }

    pub fn weak_harnack(m: f64, a: f64, rho: f64, delta: f64) -> Self {
        Self {
            m,
            a,
            rho,
            delta,
            ..Self::new(1.0, a, a, rho)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidParameter(format!("Lambda must be positive, got {}", self.lambda)));
        }
        if !(self.a_lo > 0.0 && self.a_lo <= self.a_hi) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < a_lo <= a_hi, got [{}, {}]",
                self.a_lo, self.a_hi
            )));
        }
        if !(self.r > 0.0) || !(self.rho >= 0.0) || !(self.m >= 0.0) || !(self.a > 0.0) {
            return Err(Error::InvalidParameter("need r > 0, rho >= 0, M >= 0, a > 0".into()));
        }
        if !(self.delta >= 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidParameter(format!("delta must lie in [0, 1), got {}", self.delta)));
        }
        if !(self.touch_k >= 0.0) || !(self.domain_radius > 0.0) || self.max_witnesses == 0 {
            return Err(Error::InvalidParameter(
                "need touch_k >= 0, domain_radius > 0, max_witnesses >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Openings `a_lo, 2 a_lo, 4 a_lo, ...` capped by `a_hi`, which is always included.
    pub fn opening_sample(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut a = self.a_lo;
        while a < self.a_hi * (1.0 - 1e-12) {
            out.push(a);
            a *= 2.0;
        }
        out.push(self.a_hi);
        out
    }
}

/// Deterministic sample of unit directions (a direction and its negative are
/// interchangeable, so only a half-sphere is needed in the plane).
pub fn direction_sample(dim: usize) -> Vec<Vec<f64>> {
    match dim {
        0 => Vec::new(),
        1 => vec![vec![1.0]],
        2 => (0..32)
            .map(|k| {
                let t = std::f64::consts::PI * k as f64 / 32.0;
                vec![t.cos(), t.sin()]
            })
            .collect(),
        n => (1..=64).map(|k| halton_direction(k, n)).collect(),
    }
}

fn radical_inverse(mut k: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while k > 0 {
        f /= base as f64;
        r += f * (k % base) as f64;
        k /= base;
    }
    r
}

const PRIMES: [usize; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

/// Halton point pushed through Box–Muller and normalised.
fn halton_direction(k: usize, n: usize) -> Vec<f64> {
    let m = n + n % 2;
    let u: Vec<f64> = (0..m).map(|i| radical_inverse(k, PRIMES[i % PRIMES.len()] + 0)).collect();
    let mut g = Vec::with_capacity(m);
    for pair in u.chunks(2) {
        let r = (-2.0 * pair[0].max(1e-300).ln()).sqrt();
        let t = 2.0 * std::f64::consts::PI * pair[1];
        g.push(r * t.cos());
        g.push(r * t.sin());
    }
    g.truncate(n);
    let len = norm(&g);
    g.iter().map(|x| x / len).collect()
}

/// Linear parts tried at each center.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BSample {
    /// `{0}` together with `grad_h u(x0) / a` clipped to the unit ball.
    #[default]
    ZeroAndGradient,
    Zero,
    Fixed { values: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Definition {
    #[serde(rename = "2.1")]
    LocalP,
    #[serde(rename = "2.5")]
    GlobalP,
    #[serde(rename = "2.2")]
    PointwiseW,
    #[serde(rename = "2.6")]
    ContactW,
}

impl Definition {
    pub fn label(&self) -> &'static str {
        match self {
            Definition::LocalP => "2.1",
            Definition::GlobalP => "2.5",
            Definition::PointwiseW => "2.2",
            Definition::ContactW => "2.6",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "2.1" => Ok(Definition::LocalP),
            "2.5" => Ok(Definition::GlobalP),
            "2.2" => Ok(Definition::PointwiseW),
            "2.6" => Ok(Definition::ContactW),
            other => Err(Error::Config(format!(
                "unknown definition {other:?}; expected 2.1, 2.2, 2.5 or 2.6"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WMode {
    Pointwise,
    Contact,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    pub node: usize,
    pub x0: Vec<f64>,
    pub a: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub direction_index: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub direction: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<f64>,
    /// Index of the contact record, for the contact-point forms.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paraboloid: Option<Paraboloid>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fraction: Option<f64>,
    /// Touching forms: min over the punctured neighbourhood of `u - test`.
    /// Measure forms: `fraction - (1 - delta)`.
    pub margin: f64,
    /// Within tolerance of the decision boundary.
    pub marginal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViolationReport {
    pub definition: Definition,
    pub pass: bool,
    /// `pass`, `fail`, `vacuous` or `unresolved`.
    pub status: String,
    pub witness_count: usize,
    pub witnesses: Vec<Witness>,
    pub tested: usize,
    /// Candidates dropped because the value-matched `d` had `|d| > 1`.
    pub filtered_by_d: usize,
    /// Smallest `M` that would pass (measure forms only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub smallest_m: Option<f64>,
    /// Neighbourhood radius actually used.
    pub r_effective: f64,
    pub tolerance_k: f64,
    pub warnings: Vec<String>,
    pub params: ClassParams,
}

impl ViolationReport {
    fn finish(
        definition: Definition,
        params: &ClassParams,
        mut witnesses: Vec<Witness>,
        tested: usize,
        r_effective: f64,
    ) -> Self {
        let witness_count = witnesses.len();
        witnesses.truncate(params.max_witnesses);
        let pass = witness_count == 0;
        Self {
            definition,
            pass,
            status: if pass { "pass" } else { "fail" }.into(),
            witness_count,
            witnesses,
            tested,
            filtered_by_d: 0,
            smallest_m: None,
            r_effective,
            tolerance_k: params.touch_k,
            warnings: Vec::new(),
            params: params.clone(),
        }
    }
}

/// Lattice offsets `v` with `0 < |v| h <= radius`, in lexicographic order.
fn ball_offsets(lat: &Lattice, radius: f64) -> Vec<Vec<i64>> {
    let h = lat.spacing();
    let k = (radius / h + 1e-9).floor() as i64;
    let dim = lat.dim();
    let lim = (radius / h) * (radius / h) * (1.0 + 1e-12);
    let mut out = Vec::new();
    let mut m = vec![-k; dim];
    loop {
        let r2: i64 = m.iter().map(|x| x * x).sum();
        if r2 > 0 && (r2 as f64) <= lim {
            out.push(m.clone());
        }
        let mut axis = dim;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            if m[axis] < k {
                m[axis] += 1;
                break;
            }
            m[axis] = -k;
        }
    }
}

fn shift(lat: &Lattice, node: usize, off: &[i64]) -> Option<usize> {
    let mut idx = node as i64;
    for (axis, &o) in off.iter().enumerate() {
        let m = lat.axis_index(node, axis) as i64 + o;
        if m < 0 || m >= lat.counts()[axis] as i64 {
            return None;
        }
        idx += o * lat.strides()[axis] as i64;
    }
    Some(idx as usize)
}

/// Nodes `x0` with `B_radius(x0)` inside both `B_domain` and the lattice box.
fn centers_with_room(lat: &Lattice, radius: f64, domain: f64, centers: Option<&Region>) -> Vec<usize> {
    let h = lat.spacing();
    let k = (radius / h + 1e-9).floor() as usize;
    let mut p = vec![0.0; lat.dim()];
    (0..lat.len())
        .filter(|&i| {
            lat.point_into(i, &mut p);
            if norm(&p) + radius > domain + 1e-12 {
                return false;
            }
            if let Some(c) = centers {
                if !c.contains(&p) {
                    return false;
                }
            }
            (0..lat.dim()).all(|a| {
                let m = lat.axis_index(i, a);
                m >= k && m + k < lat.counts()[a]
            })
        })
        .collect()
}

fn check_values(u: &GridFunction) -> Result<()> {
    if let Some(i) = u.values().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { node: i });
    }
    Ok(())
}

fn check_nonnegative(u: &GridFunction) -> Result<()> {
    check_values(u)?;
    if let Some((i, &v)) = u.values().iter().enumerate().find(|(_, &v)| v < 0.0) {
        return Err(Error::NegativeValue { node: i, value: v });
    }
    Ok(())
}

/// Central-difference gradient at an interior node.
fn discrete_gradient(u: &GridFunction, node: usize) -> Vec<f64> {
    let lat = u.lattice();
    let h = lat.spacing();
    (0..lat.dim())
        .map(|a| {
            let s = lat.strides()[a];
            (u.value(node + s) - u.value(node - s)) / (2.0 * h)
        })
        .collect()
}

fn clip_unit(b: Vec<f64>) -> Vec<f64> {
    let n = norm(&b);
    if n > 1.0 {
        b.iter().map(|x| x / n).collect()
    } else {
        b
    }
}

/// Samples used by the local check.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalSamples {
    pub directions: Vec<Vec<f64>>,
    pub b: BSample,
    pub openings: Vec<f64>,
    /// Restricts the tested centers; `None` tests every admissible node.
    pub centers: Option<Region>,
}

impl LocalSamples {
    pub fn defaults(dim: usize, params: &ClassParams) -> Self {
        Self {
            directions: direction_sample(dim),
            b: BSample::ZeroAndGradient,
            openings: params.opening_sample(),
            centers: None,
        }
    }
}

/// `min over 0 < |v| <= r of u(x0+v) - u(x0) - a q(v)` where
/// `q(v) = (Lambda/2)(v.xi)^2 - |v|^2/2 + b.v`.
fn local_margin(
    u: &GridFunction,
    node: usize,
    offsets: &[Vec<i64>],
    lambda: f64,
    xi: &[f64],
    b: &[f64],
    a: f64,
) -> f64 {
    let lat = u.lattice();
    let h = lat.spacing();
    let u0 = u.value(node);
    let mut m = f64::INFINITY;
    for off in offsets {
        let Some(j) = shift(lat, node, off) else { continue };
        let mut along = 0.0;
        let mut sq = 0.0;
        let mut lin = 0.0;
        for k in 0..off.len() {
            let v = off[k] as f64 * h;
            along += v * xi[k];
            sq += v * v;
            lin += b[k] * v;
        }
        let q = 0.5 * lambda * along * along - 0.5 * sq + lin;
        m = m.min(u.value(j) - u0 - a * q);
    }
    m
}

/// Local supersolution check: can some sampled `a P_Lambda(x - x0)` touch
/// `u` from below at `x0` in `B_r(x0)`?
pub fn check_p_local(u: &GridFunction, params: &ClassParams, samples: &LocalSamples) -> Result<ViolationReport> {
    params.validate()?;
    check_values(u)?;
    let lat = u.lattice();
    let h = lat.spacing();
    if params.r < 2.0 * h * (1.0 - 1e-12) {
        return Err(Error::Unresolved(format!(
            "r = {} is below two lattice spacings ({})",
            params.r,
            2.0 * h
        )));
    }
    if samples.directions.is_empty() || samples.openings.is_empty() {
        return Err(Error::InvalidParameter("direction and opening samples must be nonempty".into()));
    }
    for xi in &samples.directions {
        if xi.len() != lat.dim() || (norm(xi) - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter("directions must be unit vectors".into()));
        }
    }
    let offsets = ball_offsets(lat, params.r);
    let centers = centers_with_room(lat, params.r, params.domain_radius, samples.centers.as_ref());
    let results: Vec<(Vec<Witness>, usize)> = centers
        .par_iter()
        .map(|&node| {
            let mut found = Vec::new();
            let mut filtered = 0;
            let x0 = lat.point(node);
            let grad = discrete_gradient(u, node);
            for &a in &samples.openings {
                let d = u.value(node) / a;
                if d.abs() > 1.0 {
                    filtered += 1;
                    continue;
                }
                let tol = params.touch_k * a * h * h;
                let bs: Vec<Vec<f64>> = match &samples.b {
                    BSample::Zero => vec![vec![0.0; lat.dim()]],
                    BSample::ZeroAndGradient => {
                        let g = clip_unit(grad.iter().map(|x| x / a).collect());
                        if g.iter().all(|&x| x == 0.0) {
                            vec![g]
                        } else {
                            vec![vec![0.0; lat.dim()], g]
                        }
                    }
                    BSample::Fixed { values } => values.clone(),
                };
                for (k, xi) in samples.directions.iter().enumerate() {
                    for b in &bs {
                        let m = local_margin(u, node, &offsets, params.lambda, xi, b, a);
                        if m >= -tol {
                            found.push(Witness {
                                node,
                                x0: x0.clone(),
                                a,
                                direction_index: Some(k),
                                direction: Some(xi.clone()),
                                b: Some(b.clone()),
                                d: Some(d),
                                record: None,
                                paraboloid: None,
                                fraction: None,
                                margin: m,
                                marginal: m < 0.0,
                            });
                        }
                    }
                }
            }
            (found, filtered)
        })
        .collect();
    let filtered: usize = results.iter().map(|r| r.1).sum();
    let mut witnesses: Vec<Witness> = results.into_iter().flat_map(|r| r.0).collect();
    sort_witnesses(&mut witnesses);
    let mut rep = ViolationReport::finish(Definition::LocalP, params, witnesses, centers.len(), params.r);
    rep.filtered_by_d = filtered;
    if centers.is_empty() {
        rep.status = "vacuous".into();
        rep.warnings.push("no center has B_r(x0) inside the domain".into());
    }
    Ok(rep)
}

fn sort_witnesses(w: &mut [Witness]) {
    w.sort_by(|p, q| {
        (p.node, p.record, p.direction_index)
            .cmp(&(q.node, q.record, q.direction_index))
            .then(p.a.total_cmp(&q.a))
    });
}

/// Global supersolution check at contact points: can
/// `P_y^a + a (Lambda/2)((x-x0).xi)^2 chi_{B_r(x0)}` touch `u` from below in `B_1`?
///
/// When `r` is below two spacings it is raised to `2h` and the report is
/// marked unresolved.
pub fn check_p_global(
    u: &GridFunction,
    params: &ClassParams,
    contact: &ContactSet,
    directions: &[Vec<f64>],
) -> Result<ViolationReport> {
    params.validate()?;
    check_values(u)?;
    let lat = u.lattice();
    let h = lat.spacing();
    let a = contact.opening;
    if a < params.a_lo * (1.0 - 1e-12) || a > params.a_hi * (1.0 + 1e-12) {
        return Err(Error::InvalidParameter(format!(
            "contact opening {a} outside I = [{}, {}]",
            params.a_lo, params.a_hi
        )));
    }
    if contact.dim != lat.dim() || (contact.spacing - h).abs() > 1e-15 {
        return Err(Error::GridMismatch("contact set was computed on another lattice".into()));
    }
    if directions.is_empty() {
        return Err(Error::InvalidParameter("direction sample must be nonempty".into()));
    }
    let unresolved = params.r < 2.0 * h * (1.0 - 1e-12);
    let r = if unresolved { 2.0 * h } else { params.r };
    let offsets = ball_offsets(lat, r);
    let domain = touch_domain(lat);
    let tol = params.touch_k * a * h * h;
    let recs: Vec<(usize, &crate::contact::ContactRecord)> = contact
        .records
        .iter()
        .enumerate()
        .filter(|(_, rec)| rec.admissible)
        .collect();
    let found: Vec<Vec<Witness>> = recs
        .par_iter()
        .map(|&(ri, rec)| {
            let node = rec.contact_node;
            let par = &rec.paraboloid;
            // the paraboloid alone must stay below u on B_1
            let mut p = vec![0.0; lat.dim()];
            let below = domain.iter().all(|&j| {
                lat.point_into(j, &mut p);
                u.value(j) - par.eval(&p) >= -tol
            });
            if !below {
                return Vec::new();
            }
            let mut out = Vec::new();
            for (k, xi) in directions.iter().enumerate() {
                let m = global_margin(u, node, &offsets, params.lambda, xi, par);
                if m >= -tol {
                    out.push(Witness {
                        node,
                        x0: rec.contact_point.clone(),
                        a,
                        direction_index: Some(k),
                        direction: Some(xi.clone()),
                        b: None,
                        d: None,
                        record: Some(ri),
                        paraboloid: Some(par.clone()),
                        fraction: None,
                        margin: m,
                        marginal: m < 0.0,
                    });
                }
            }
            out
        })
        .collect();
    let mut witnesses: Vec<Witness> = found.into_iter().flatten().collect();
    sort_witnesses(&mut witnesses);
    let mut rep = ViolationReport::finish(Definition::GlobalP, params, witnesses, recs.len(), r);
    if recs.is_empty() {
        rep.status = "vacuous".into();
        rep.warnings.push("contact set is empty; the check passes vacuously".into());
    } else if unresolved {
        rep.status = if rep.pass { "unresolved" } else { "fail" }.into();
        rep.warnings.push(format!(
            "r = {} is below two lattice spacings; used r = {r}",
            params.r
        ));
    }
    Ok(rep)
}

fn global_margin(
    u: &GridFunction,
    node: usize,
    offsets: &[Vec<i64>],
    lambda: f64,
    xi: &[f64],
    par: &Paraboloid,
) -> f64 {
    let lat = u.lattice();
    let h = lat.spacing();
    let a = par.opening;
    let mut p = vec![0.0; lat.dim()];
    let mut m = f64::INFINITY;
    for off in offsets {
        let Some(j) = shift(lat, node, off) else { continue };
        lat.point_into(j, &mut p);
        if norm(&p) > 1.0 + 1e-12 {
            continue;
        }
        let along: f64 = off.iter().zip(xi).map(|(&o, x)| o as f64 * h * x).sum();
        m = m.min(u.value(j) - par.eval(&p) - 0.5 * a * lambda * along * along);
    }
    m
}

/// Index `k` such that the `k`-th smallest of `n` values is the least
/// threshold keeping a fraction `>= 1 - delta` below it.
fn quantile_rank(n: usize, delta: f64) -> usize {
    let need = ((1.0 - delta) * n as f64 - 1e-9).ceil().max(1.0) as usize;
    need.min(n) - 1
}

/// Weak-Harnack check, pointwise (`|{u <= M a} cap B_rho(x0)|`) or at contact
/// points (`|{u <= P + M a} cap B_rho(x0)|`).
pub fn check_w(
    u: &GridFunction,
    params: &ClassParams,
    mode: WMode,
    contact: Option<&ContactSet>,
) -> Result<ViolationReport> {
    params.validate()?;
    check_nonnegative(u)?;
    let lat = u.lattice();
    let h = lat.spacing();
    if params.rho < h {
        return Err(Error::Unresolved(format!(
            "rho = {} is below the lattice spacing {h}",
            params.rho
        )));
    }
    let offsets = ball_offsets(lat, params.rho);
    let a = params.a;
    let threshold_rank = |vals: &mut Vec<f64>| -> f64 {
        vals.sort_by(f64::total_cmp);
        vals[quantile_rank(vals.len(), params.delta)]
    };
    match mode {
        WMode::Pointwise => {
            let centers: Vec<usize> =
                centers_with_room(lat, 2.0 * params.rho, params.domain_radius, None)
                    .into_iter()
                    .filter(|&i| u.value(i) <= a)
                    .collect();
            let rows: Vec<(usize, f64, f64)> = centers
                .par_iter()
                .map(|&node| {
                    let mut vals: Vec<f64> = std::iter::once(u.value(node))
                        .chain(offsets.iter().filter_map(|o| shift(lat, node, o)).map(|j| u.value(j)))
                        .collect();
                    let count = vals.iter().filter(|&&v| v <= params.m * a).count();
                    let frac = count as f64 / vals.len() as f64;
                    let need = threshold_rank(&mut vals) / a;
                    (node, frac, need)
                })
                .collect();
            Ok(measure_report(Definition::PointwiseW, params, &rows, None, contact.is_some()))
        }
        WMode::Contact => {
            let set = contact.ok_or_else(|| {
                Error::InvalidParameter("contact mode needs a contact set".into())
            })?;
            if set.dim != lat.dim() || (set.spacing - h).abs() > 1e-15 {
                return Err(Error::GridMismatch("contact set was computed on another lattice".into()));
            }
            let recs: Vec<(usize, &crate::contact::ContactRecord)> =
                set.records.iter().enumerate().filter(|(_, r)| r.admissible).collect();
            let rows: Vec<(usize, f64, f64)> = recs
                .par_iter()
                .map(|&(_, rec)| {
                    let node = rec.contact_node;
                    let par = &rec.paraboloid;
                    let mut p = vec![0.0; lat.dim()];
                    let mut vals: Vec<f64> = std::iter::once(node)
                        .chain(offsets.iter().filter_map(|o| shift(lat, node, o)))
                        .map(|j| {
                            lat.point_into(j, &mut p);
                            u.value(j) - par.eval(&p)
                        })
                        .collect();
                    let count = vals.iter().filter(|&&v| v <= params.m * par.opening).count();
                    let frac = count as f64 / vals.len() as f64;
                    let need = threshold_rank(&mut vals) / par.opening;
                    (node, frac, need)
                })
                .collect();
            let indices: Vec<usize> = recs.iter().map(|r| r.0).collect();
            let mut rep = measure_report(Definition::ContactW, params, &rows, Some((&indices, set)), false);
            if recs.is_empty() {
                rep.status = "vacuous".into();
                rep.warnings.push("contact set is empty; the check passes vacuously".into());
            }
            Ok(rep)
        }
    }
}

fn measure_report(
    def: Definition,
    params: &ClassParams,
    rows: &[(usize, f64, f64)],
    records: Option<(&[usize], &ContactSet)>,
    ignored_contact: bool,
) -> ViolationReport {
    let floor = 1.0 - params.delta;
    let mut witnesses = Vec::new();
    for (k, &(node, frac, _)) in rows.iter().enumerate() {
        if frac < floor {
            let (record, paraboloid, x0, a) = match records {
                Some((idx, set)) => {
                    let rec = &set.records[idx[k]];
                    (Some(idx[k]), Some(rec.paraboloid.clone()), rec.contact_point.clone(), rec.paraboloid.opening)
                }
                None => (None, None, Vec::new(), params.a),
            };
            witnesses.push(Witness {
                node,
                x0,
                a,
                direction_index: None,
                direction: None,
                b: None,
                d: None,
                record,
                paraboloid,
                fraction: Some(frac),
                margin: frac - floor,
                marginal: frac - floor > -1e-12,
            });
        }
    }
    sort_witnesses(&mut witnesses);
    let smallest = rows.iter().map(|r| r.2).fold(0.0f64, f64::max);
    let mut rep = ViolationReport::finish(def, params, witnesses, rows.len(), params.rho);
    rep.smallest_m = Some(smallest.max(0.0));
    if ignored_contact {
        rep.warnings.push("pointwise mode ignores the supplied contact set".into());
    }
    if rows.is_empty() && def == Definition::PointwiseW {
        rep.status = "vacuous".into();
        rep.warnings.push("no node with u(x0) <= a and B_2rho(x0) inside the domain".into());
    }
    rep
}

/// Recomputes a witness margin from scratch.
pub fn witness_margin(
    u: &GridFunction,
    definition: Definition,
    params: &ClassParams,
    w: &Witness,
) -> Result<f64> {
    let lat = u.lattice();
    let xi = || {
        w.direction
            .clone()
            .ok_or_else(|| Error::InvalidParameter("witness has no direction".into()))
    };
    match definition {
        Definition::LocalP => {
            let b = w.b.clone().ok_or_else(|| Error::InvalidParameter("witness has no b".into()))?;
            let offsets = ball_offsets(lat, params.r);
            Ok(local_margin(u, w.node, &offsets, params.lambda, &xi()?, &b, w.a))
        }
        Definition::GlobalP => {
            let par = w
                .paraboloid
                .as_ref()
                .ok_or_else(|| Error::InvalidParameter("witness has no paraboloid".into()))?;
            let r = params.r.max(2.0 * lat.spacing());
            let offsets = ball_offsets(lat, r);
            Ok(global_margin(u, w.node, &offsets, params.lambda, &xi()?, par))
        }
        Definition::PointwiseW | Definition::ContactW => {
            let offsets = ball_offsets(lat, params.rho);
            let mut p = vec![0.0; lat.dim()];
            let mut count = 0usize;
            let mut total = 0usize;
            for j in std::iter::once(w.node).chain(offsets.iter().filter_map(|o| shift(lat, w.node, o))) {
                let base = match &w.paraboloid {
                    Some(par) => {
                        lat.point_into(j, &mut p);
                        par.eval(&p)
                    }
                    None => 0.0,
                };
                total += 1;
                if u.value(j) - base <= params.m * w.a {
                    count += 1;
                }
            }
            Ok(count as f64 / total as f64 - (1.0 - params.delta))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contact::{contact_set, lattice_vertices};

    fn lat(h: f64) -> Lattice {
        Lattice::centered(2, h, 1.0).unwrap()
    }

    #[test]
    fn polynomial_invariants() {
        let p = LambdaPolynomial::new(4.0, vec![1.0, 0.0], vec![0.5, 0.0], 0.25, 2.0, vec![0.0, 0.0]).unwrap();
        assert_eq!(p.eval(&[0.0, 0.0]), 0.5);
        assert_eq!(p.eval(&[1.0, 0.0]), 2.0 * (2.0 - 0.5 + 0.5 + 0.25));
        assert!(LambdaPolynomial::new(4.0, vec![1.0, 1.0], vec![0.0; 2], 0.0, 1.0, vec![0.0; 2]).is_err());
        assert!(LambdaPolynomial::new(4.0, vec![1.0, 0.0], vec![2.0, 0.0], 0.0, 1.0, vec![0.0; 2]).is_err());
    }

    #[test]
    fn directions_are_unit() {
        assert_eq!(direction_sample(2).len(), 32);
        let d3 = direction_sample(3);
        assert_eq!(d3.len(), 64);
        for d in d3.iter().chain(direction_sample(2).iter()) {
            assert!((norm(d) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn opening_sample_doubles() {
        let p = ClassParams::new(5.0, 1.0, 5.0, 0.1);
        assert_eq!(p.opening_sample(), vec![1.0, 2.0, 4.0, 5.0]);
        let q = ClassParams::new(5.0, 1.0, 1.0, 0.1);
        assert_eq!(q.opening_sample(), vec![1.0]);
    }

    #[test]
    fn zero_passes_local() {
        let l = lat(0.0625);
        let u = GridFunction::constant(&l, 0.0).unwrap();
        let params = ClassParams::new(4.0, 1.0, 1.0, 0.25);
        let rep = check_p_local(&u, &params, &LocalSamples::defaults(2, &params)).unwrap();
        assert!(rep.pass, "{:?}", rep.witnesses.first());
        assert!(rep.tested > 0);
    }

    #[test]
    fn self_touching_fails_everywhere() {
        let l = lat(0.0625);
        let lambda = 4.0;
        let u = GridFunction::from_fn(&l, |p| 0.5 * lambda * p[0] * p[0] - 0.5 * (p[0] * p[0] + p[1] * p[1])).unwrap();
        let params = ClassParams::new(lambda, 1.0, 1.0, 0.125);
        let samples = LocalSamples {
            directions: vec![vec![1.0, 0.0]],
            b: BSample::ZeroAndGradient,
            openings: vec![1.0],
            centers: Some(Region::ball0(2, 0.25)),
        };
        let rep = check_p_local(&u, &params, &samples).unwrap();
        assert!(!rep.pass);
        let mut nodes: Vec<usize> = rep.witnesses.iter().map(|w| w.node).collect();
        nodes.dedup();
        assert_eq!(nodes.len(), rep.tested);
        for w in &rep.witnesses {
            let again = witness_margin(&u, Definition::LocalP, &params, w).unwrap();
            assert!((again - w.margin).abs() < 1e-10);
        }
    }

    #[test]
    fn local_needs_resolved_r() {
        let l = lat(0.0625);
        let u = GridFunction::constant(&l, 0.0).unwrap();
        let params = ClassParams::new(4.0, 1.0, 1.0, 0.1);
        assert!(matches!(
            check_p_local(&u, &params, &LocalSamples::defaults(2, &params)),
            Err(Error::Unresolved(_))
        ));
    }

    #[test]
    fn global_zero_passes_and_constructed_fails() {
        let h = 0.03125;
        let l = lat(h);
        let params = ClassParams::new(8.0, 1.0, 1.0, 0.125);
        let zero = GridFunction::constant(&l, 0.0).unwrap();
        let set = contact_set(&zero, 1.0, &lattice_vertices(&l, 0.5)).unwrap();
        let rep = check_p_global(&zero, &params, &set, &direction_sample(2)).unwrap();
        assert!(rep.pass);
        assert!(rep.tested > 0);

        // u = P^1_0 + (Lambda/2) x1^2 on B_r plus a small bowl, cut at zero
        let lambda = params.lambda;
        let r = params.r;
        let u = GridFunction::from_fn(&l, |p| {
            let r2 = p[0] * p[0] + p[1] * p[1];
            let bump = if r2.sqrt() <= r { 0.5 * lambda * p[0] * p[0] } else { 0.0 };
            (0.2 - 0.5 * r2 + bump + 0.1 * r2).max(0.0)
        })
        .unwrap();
        let set = contact_set(&u, 1.0, &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(set.records[0].contact_point, vec![0.0, 0.0]);
        let rep = check_p_global(&u, &params, &set, &[vec![1.0, 0.0]]).unwrap();
        assert!(!rep.pass);
        assert_eq!(rep.witnesses[0].x0, vec![0.0, 0.0]);
    }

    #[test]
    fn global_unresolved_radius_is_flagged() {
        let l = lat(0.0625);
        let zero = GridFunction::constant(&l, 0.0).unwrap();
        let set = contact_set(&zero, 1.0, &lattice_vertices(&l, 0.25)).unwrap();
        let params = ClassParams::new(8.0, 1.0, 1.0, 1e-3);
        let rep = check_p_global(&zero, &params, &set, &direction_sample(2)).unwrap();
        assert_eq!(rep.status, "unresolved");
        assert_eq!(rep.r_effective, 0.125);
    }

    #[test]
    fn weak_harnack_examples() {
        let l = lat(0.03125);
        let zero = GridFunction::constant(&l, 0.0).unwrap();
        let params = ClassParams::weak_harnack(1.0, 1.0, 0.125, 0.05);
        let rep = check_w(&zero, &params, WMode::Pointwise, None).unwrap();
        assert!(rep.pass);
        assert_eq!(rep.smallest_m, Some(0.0));

        // half of B_rho(0) lifted far above M a
        let m = 2.0;
        let rho = 0.125;
        let lifted = GridFunction::from_fn(&l, |p| {
            if p[0] > 0.0 && (p[0] * p[0] + p[1] * p[1]).sqrt() <= rho {
                10.0 * m
            } else {
                0.0
            }
        })
        .unwrap();
        let params = ClassParams::weak_harnack(m, 1.0, rho, 0.05);
        let rep = check_w(&lifted, &params, WMode::Pointwise, None).unwrap();
        assert!(!rep.pass);
        let w = rep.witnesses.iter().find(|w| w.node == l.node_at(&[0.0, 0.0]).unwrap()).unwrap();
        let f = w.fraction.unwrap();
        assert!((f - 0.5).abs() < 0.1, "{f}");
        let again = witness_margin(&lifted, Definition::PointwiseW, &params, w).unwrap();
        assert!((again - w.margin).abs() < 1e-12);

        let neg = GridFunction::constant(&l, -1.0).unwrap();
        assert!(matches!(
            check_w(&neg, &params, WMode::Pointwise, None),
            Err(Error::NegativeValue { .. })
        ));
    }

    #[test]
    fn contact_mode_on_zero() {
        let l = lat(0.0625);
        let zero = GridFunction::constant(&l, 0.0).unwrap();
        let set = contact_set(&zero, 1.0, &lattice_vertices(&l, 0.5)).unwrap();
        let params = ClassParams::weak_harnack(1.0, 1.0, 0.125, 0.0);
        let rep = check_w(&zero, &params, WMode::Contact, Some(&set)).unwrap();
        assert!(rep.pass);
        assert_eq!(rep.tested, set.records.len());
    }

    #[test]
    fn quantile_ranks() {
        assert_eq!(quantile_rank(10, 0.0), 9);
        assert_eq!(quantile_rank(10, 0.05), 9);
        assert_eq!(quantile_rank(10, 0.1), 8);
        assert_eq!(quantile_rank(4, 0.25), 2);
        assert_eq!(quantile_rank(1, 0.5), 0);
    }
}
