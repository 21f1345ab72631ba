//! Sliding paraboloids, contact sets `A_a(u)`, their dyadic covers and the
//! radial barrier used to push contact points inward.
//!
//! A paraboloid of opening `a` and vertex `y` is
//! `P(x) = -(a/2)|x - y|^2 + c`. Sliding it up from below until it first
//! touches `u` fixes `c = min_x [u(x) + (a/2)|x - y|^2]`; the minimiser is the
//! contact point. The paraboloid is admissible when it is nonpositive outside
//! `B_{3/4}`, i.e. `c <= (a/2)(3/4 - |y|)^2`.
//!
//! Touching is evaluated on the lattice nodes of the closed unit ball.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lattice::{measure_fraction, DyadicCube, GridFunction, Lattice, Region};
use crate::{dist2, fmt_f64, norm};

/// Radius outside of which admissible paraboloids are nonpositive.
pub const ADMISSIBLE_RADIUS: f64 = 0.75;

/// Default `K` in the touching tolerance `K * a * h^2`.
pub const DEFAULT_TOUCH_K: f64 = 4.0;

pub fn touch_tolerance(opening: f64, spacing: f64, k: f64) -> f64 {
    k * opening * spacing * spacing
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Paraboloid {
    pub opening: f64,
    pub vertex: Vec<f64>,
    pub offset: f64,
}

impl Paraboloid {
    pub fn eval(&self, x: &[f64]) -> f64 {
        -0.5 * self.opening * dist2(x, &self.vertex) + self.offset
    }

    pub fn gradient_norm(&self, x: &[f64]) -> f64 {
        self.opening * dist2(x, &self.vertex).sqrt()
    }

    /// Largest admissible offset for this opening and vertex.
    pub fn offset_bound(opening: f64, vertex: &[f64]) -> f64 {
        let gap = ADMISSIBLE_RADIUS - norm(vertex);
        if gap < 0.0 {
            f64::NEG_INFINITY
        } else {
            0.5 * opening * gap * gap
        }
    }

    pub fn is_admissible(&self) -> bool {
        self.offset <= Self::offset_bound(self.opening, &self.vertex)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContactRecord {
    pub paraboloid: Paraboloid,
    pub contact_node: usize,
    pub contact_point: Vec<f64>,
    pub admissible: bool,
}

/// Result of sliding a family of paraboloids of one opening.
///
/// `records` keeps every slide in vertex order, inadmissible ones included;
/// only admissible contact points enter the node set.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactSet {
    pub opening: f64,
    pub spacing: f64,
    pub dim: usize,
    pub records: Vec<ContactRecord>,
    nodes: Vec<usize>,
}

impl ContactSet {
    /// Distinct admissible contact nodes, ascending.
    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn admissible(&self) -> impl Iterator<Item = &ContactRecord> {
        self.records.iter().filter(|r| r.admissible)
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// CSV with columns `y1..yn,a,c_y,z1..zn,admissible`.
    pub fn to_csv(&self) -> String {
        let n = self.dim;
        let mut cols: Vec<String> = (1..=n).map(|i| format!("y{i}")).collect();
        cols.push("a".into());
        cols.push("c_y".into());
        cols.extend((1..=n).map(|i| format!("z{i}")));
        cols.push("admissible".into());
        let mut out = cols.join(",");
        out.push('\n');
        for r in &self.records {
            let mut row: Vec<String> = r.paraboloid.vertex.iter().map(|v| fmt_f64(*v)).collect();
            row.push(fmt_f64(r.paraboloid.opening));
            row.push(fmt_f64(r.paraboloid.offset));
            row.extend(r.contact_point.iter().map(|v| fmt_f64(*v)));
            row.push(r.admissible.to_string());
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

fn check_domain(lat: &Lattice) -> Result<()> {
    let bx = lat.box_spec();
    for (axis, (c, w)) in bx.center.iter().zip(&bx.half_widths).enumerate() {
        if c - w > -1.0 + 1e-12 || c + w < 1.0 - 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "lattice box does not contain B_1 along axis {axis}"
            )));
        }
    }
    Ok(())
}

/// Nodes of the closed unit ball, where touching is tested.
pub fn touch_domain(lat: &Lattice) -> Vec<usize> {
    lat.nodes_in(&Region::ball0(lat.dim(), 1.0))
}

fn check_vertex(lat: &Lattice, y: &[f64]) -> Result<()> {
    if y.len() != lat.dim() {
        return Err(Error::InvalidParameter(format!(
            "vertex has {} coordinates, lattice dimension is {}",
            y.len(),
            lat.dim()
        )));
    }
    if norm(y) > ADMISSIBLE_RADIUS + 1e-12 {
        return Err(Error::InvalidParameter(format!(
            "vertex {y:?} lies outside B_3/4"
        )));
    }
    Ok(())
}

fn check_finite(u: &GridFunction) -> Result<()> {
    match u.values().iter().position(|v| !v.is_finite()) {
        Some(node) => Err(Error::NonFinite { node }),
        None => Ok(()),
    }
}

fn check_opening(a: f64) -> Result<()> {
    if !(a.is_finite() && a > 0.0) {
        return Err(Error::InvalidParameter(format!("opening must be positive, got {a}")));
    }
    Ok(())
}

fn record_for(u: &GridFunction, a: f64, y: &[f64], node: usize) -> ContactRecord {
    let z = u.lattice().point(node);
    let offset = u.value(node) + 0.5 * a * dist2(&z, y);
    let paraboloid = Paraboloid {
        opening: a,
        vertex: y.to_vec(),
        offset,
    };
    ContactRecord {
        admissible: paraboloid.is_admissible(),
        paraboloid,
        contact_node: node,
        contact_point: z,
    }
}

fn brute_force_argmin(u: &GridFunction, domain: &[usize], a: f64, y: &[f64]) -> usize {
    let lat = u.lattice();
    let mut p = vec![0.0; lat.dim()];
    let mut best = f64::INFINITY;
    let mut arg = domain[0];
    for &i in domain {
        lat.point_into(i, &mut p);
        let v = u.value(i) + 0.5 * a * dist2(&p, y);
        if v < best {
            best = v;
            arg = i;
        }
    }
    arg
}

/// Slides the paraboloid of opening `a` and vertex `y` up to `u`.
///
/// Ties between minimisers go to the lexicographically smallest node.
pub fn slide_to_touch(u: &GridFunction, a: f64, y: &[f64]) -> Result<ContactRecord> {
    let lat = u.lattice();
    check_opening(a)?;
    check_domain(lat)?;
    check_vertex(lat, y)?;
    check_finite(u)?;
    let domain = touch_domain(lat);
    Ok(record_for(u, a, y, brute_force_argmin(u, &domain, a, y)))
}

/// Lower envelope of the parabolas `f[q] + alpha (p - q)^2` on `0..n`
/// (Felzenszwalb–Huttenlocher). Infinite entries are skipped; on exact ties
/// the smaller `q` wins.
fn envelope_1d(
    f: &[f64],
    alpha: f64,
    out: &mut [f64],
    arg: &mut [u32],
    v: &mut Vec<usize>,
    z: &mut Vec<f64>,
) {
    v.clear();
    z.clear();
    let key = |q: usize| f[q] + alpha * (q * q) as f64;
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        let mut s = f64::NEG_INFINITY;
        while let Some(&p) = v.last() {
            s = (key(q) - key(p)) / (2.0 * alpha * (q - p) as f64);
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
                s = f64::NEG_INFINITY;
            } else {
                break;
            }
        }
        v.push(q);
        z.push(s);
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        arg.fill(u32::MAX);
        return;
    }
    let mut k = 0;
    for p in 0..f.len() {
        while k + 1 < v.len() && z[k + 1] < p as f64 {
            k += 1;
        }
        let q = v[k];
        let d = p as f64 - q as f64;
        out[p] = f[q] + alpha * d * d;
        arg[p] = q as u32;
    }
}

/// For every lattice node `y`, the node of `domain` minimising
/// `u(x) + (a/2)|x - y|^2`, by separable lower envelopes (one pass per axis).
fn envelope_argmin(u: &GridFunction, domain: &[usize], a: f64) -> Vec<Vec<u32>> {
    let lat = u.lattice();
    let dim = lat.dim();
    let h = lat.spacing();
    let alpha = 0.5 * a * h * h;
    let mut cur = vec![f64::INFINITY; lat.len()];
    for &i in domain {
        cur[i] = u.value(i);
    }
    let mut args: Vec<Vec<u32>> = vec![Vec::new(); dim];
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in (0..dim).rev() {
        let count = lat.counts()[axis];
        let stride = lat.strides()[axis];
        let mut next = vec![f64::INFINITY; lat.len()];
        let mut arg = vec![u32::MAX; lat.len()];
        let mut line = vec![0.0; count];
        let mut out = vec![0.0; count];
        let mut larg = vec![0u32; count];
        for base in 0..lat.len() {
            if (base / stride) % count != 0 {
                continue;
            }
            for m in 0..count {
                line[m] = cur[base + m * stride];
            }
            envelope_1d(&line, alpha, &mut out, &mut larg, &mut v, &mut z);
            for m in 0..count {
                next[base + m * stride] = out[m];
                arg[base + m * stride] = larg[m];
            }
        }
        args[axis] = arg;
        cur = next;
    }
    args
}

fn backtrack(lat: &Lattice, args: &[Vec<u32>], y: usize) -> usize {
    let mut idx = y;
    for (axis, arg) in args.iter().enumerate() {
        let m = arg[idx] as usize;
        let cur = lat.axis_index(idx, axis);
        idx = idx + m * lat.strides()[axis] - cur * lat.strides()[axis];
    }
    idx
}

/// Slides paraboloids of opening `a` from every vertex and collects the
/// admissible contact points.
///
/// Vertices that are all lattice nodes go through the separable envelope
/// transform; otherwise each vertex is minimised directly.
pub fn contact_set(u: &GridFunction, a: f64, vertices: &[Vec<f64>]) -> Result<ContactSet> {
    let lat = u.lattice();
    check_opening(a)?;
    check_domain(lat)?;
    if vertices.is_empty() {
        return Err(Error::InvalidParameter("vertex sample is empty".into()));
    }
    for y in vertices {
        check_vertex(lat, y)?;
    }
    check_finite(u)?;
    let domain = touch_domain(lat);
    let on_lattice: Option<Vec<usize>> = vertices.iter().map(|y| lat.node_at(y)).collect();
    let records: Vec<ContactRecord> = match on_lattice {
        Some(ids) => {
            let args = envelope_argmin(u, &domain, a);
            ids.iter()
                .zip(vertices)
                .map(|(&yi, y)| record_for(u, a, y, backtrack(lat, &args, yi)))
                .collect()
        }
        None => vertices
            .par_iter()
            .map(|y| record_for(u, a, y, brute_force_argmin(u, &domain, a, y)))
            .collect(),
    };
    Ok(assemble(a, lat, records))
}

/// Same as [`contact_set`] but always by direct minimisation; kept as the
/// reference route for the envelope transform.
pub fn contact_set_brute_force(
    u: &GridFunction,
    a: f64,
    vertices: &[Vec<f64>],
) -> Result<ContactSet> {
    let lat = u.lattice();
    check_opening(a)?;
    check_domain(lat)?;
    for y in vertices {
        check_vertex(lat, y)?;
    }
    check_finite(u)?;
    let domain = touch_domain(lat);
    let records = vertices
        .par_iter()
        .map(|y| record_for(u, a, y, brute_force_argmin(u, &domain, a, y)))
        .collect();
    Ok(assemble(a, lat, records))
}

fn assemble(a: f64, lat: &Lattice, records: Vec<ContactRecord>) -> ContactSet {
    let nodes: BTreeSet<usize> = records
        .iter()
        .filter(|r| r.admissible)
        .map(|r| r.contact_node)
        .collect();
    ContactSet {
        opening: a,
        spacing: lat.spacing(),
        dim: lat.dim(),
        records,
        nodes: nodes.into_iter().collect(),
    }
}

/// Lattice nodes of the closed ball `B_radius`, the default vertex sample.
pub fn lattice_vertices(lat: &Lattice, radius: f64) -> Vec<Vec<f64>> {
    lat.nodes_in(&Region::ball0(lat.dim(), radius))
        .into_iter()
        .map(|i| lat.point(i))
        .collect()
}

/// Union of the level-`l` dyadic cubes selected by the contact points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DyadicCover {
    pub level: u32,
    pub cubes: Vec<DyadicCube>,
    pub measure: f64,
}

impl DyadicCover {
    pub fn contains(&self, p: &[f64]) -> bool {
        let q = DyadicCube::containing(p, self.level);
        self.cubes.binary_search(&q).is_ok()
    }

    /// Fraction of the nodes of `region` lying in the cover.
    pub fn fraction_in(&self, lat: &Lattice, region: &Region) -> Result<f64> {
        measure_fraction(lat, region, |_, p| self.contains(p))
    }
}

/// The set `A^l_a(u)`: every contact point selects the half-open level-`l`
/// cube containing it.
pub fn dyadic_cover(contact: &ContactSet, lat: &Lattice, level: u32) -> Result<DyadicCover> {
    let side = crate::lattice::dyadic_side(level);
    if side < contact.spacing * (1.0 - 1e-12) {
        return Err(Error::Unresolved(format!(
            "dyadic side 2^-{level} is finer than the lattice spacing {}",
            contact.spacing
        )));
    }
    let cubes: BTreeSet<DyadicCube> = contact
        .nodes()
        .iter()
        .map(|&i| DyadicCube::containing(&lat.point(i), level))
        .collect();
    let cubes: Vec<DyadicCube> = cubes.into_iter().collect();
    let measure = cubes.len() as f64 * side.powi(contact.dim as i32);
    Ok(DyadicCover {
        level,
        cubes,
        measure,
    })
}

/// Radial barrier `phi(x) = |x|^-gamma - beta` with `gamma = 4 Lambda`,
/// vanishing on `|x| = 6 sqrt(n)`, and its tangent paraboloid at radius
/// `sigma`, `P_sigma(x) = -(d/2)|x|^2 + c` with `d = gamma sigma^(-gamma-2)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BarrierProfile {
    pub dim: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub beta: f64,
    pub sigma: f64,
    pub tangent_opening: f64,
    pub tangent_offset: f64,
}

impl BarrierProfile {
    pub fn outer_radius(&self) -> f64 {
        6.0 * (self.dim as f64).sqrt()
    }

    pub fn phi(&self, x: &[f64]) -> f64 {
        norm(x).powf(-self.gamma) - self.beta
    }

    pub fn tangent(&self, x: &[f64]) -> f64 {
        -0.5 * self.tangent_opening * dist2(x, &vec![0.0; x.len()]) + self.tangent_offset
    }

    /// `phi(x) - P_sigma(x)`, with the constants cancelled analytically.
    pub fn gap(&self, x: &[f64]) -> f64 {
        let rho = norm(x);
        let s = self.sigma;
        (rho.powf(-self.gamma) - s.powf(-self.gamma))
            + 0.5 * self.tangent_opening * (rho - s) * (rho + s)
    }
}

pub fn barrier_profile(dim: usize, lambda: f64, sigma: f64) -> Result<BarrierProfile> {
    if dim == 0 {
        return Err(Error::InvalidParameter("dimension must be at least 1".into()));
    }
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::InvalidParameter(format!("Lambda must be positive, got {lambda}")));
    }
    let outer = 6.0 * (dim as f64).sqrt();
    if sigma == 0.0 {
        return Err(Error::InvalidParameter("sigma = 0 is the singular point of the barrier".into()));
    }
    if !(sigma > 0.0 && sigma <= outer) {
        return Err(Error::InvalidParameter(format!("sigma must lie in (0, {outer}], got {sigma}")));
    }
    let gamma = 4.0 * lambda;
    let beta = outer.powf(-gamma);
    let d = gamma * sigma.powf(-gamma - 2.0);
    let c = sigma.powf(-gamma) - beta + 0.5 * d * sigma * sigma;
    Ok(BarrierProfile {
        dim,
        lambda,
        gamma,
        beta,
        sigma,
        tangent_opening: d,
        tangent_offset: c,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeparationReport {
    pub min_ratio: f64,
    pub vertices: [Vec<f64>; 2],
    pub contacts: [Vec<f64>; 2],
    pub pairs: usize,
    pub contacts_in_range: usize,
    pub min_vertex_distance: f64,
}

/// Smallest `|z1 - z2| / |y1 - y2|` over admissible contacts in `B_{5/8}`
/// whose vertices are at least `c0_big * r` apart.
pub fn vertex_contact_separation(
    u: &GridFunction,
    a: f64,
    vertices: &[Vec<f64>],
    r: f64,
    c0_big: f64,
) -> Result<SeparationReport> {
    let set = contact_set(u, a, vertices)?;
    let inner = Region::ball0(set.dim, 0.625);
    let recs: Vec<&ContactRecord> = set
        .admissible()
        .filter(|rec| inner.contains(&rec.contact_point))
        .collect();
    if recs.len() < 2 {
        return Err(Error::Hypothesis(format!(
            "need at least 2 admissible contacts in B_5/8, found {}",
            recs.len()
        )));
    }
    let threshold = c0_big * r;
    let best = (0..recs.len())
        .into_par_iter()
        .map(|i| {
            let mut best = (f64::INFINITY, usize::MAX, usize::MAX, 0usize);
            for j in i + 1..recs.len() {
                let dy = dist2(&recs[i].paraboloid.vertex, &recs[j].paraboloid.vertex).sqrt();
                if dy < threshold || dy == 0.0 {
                    continue;
                }
                best.3 += 1;
                let dz = dist2(&recs[i].contact_point, &recs[j].contact_point).sqrt();
                let ratio = dz / dy;
                if ratio < best.0 {
                    best = (ratio, i, j, best.3);
                }
            }
            best
        })
        .collect::<Vec<_>>();
    let pairs: usize = best.iter().map(|b| b.3).sum();
    let (ratio, i, j) = best
        .iter()
        .fold((f64::INFINITY, usize::MAX, usize::MAX), |acc, b| {
            if b.0 < acc.0 {
                (b.0, b.1, b.2)
            } else {
                acc
            }
        });
    if pairs == 0 {
        return Err(Error::Hypothesis(format!(
            "no vertex pairs at distance >= {threshold}"
        )));
    }
    Ok(SeparationReport {
        min_ratio: ratio,
        vertices: [recs[i].paraboloid.vertex.clone(), recs[j].paraboloid.vertex.clone()],
        contacts: [recs[i].contact_point.clone(), recs[j].contact_point.clone()],
        pairs,
        contacts_in_range: recs.len(),
        min_vertex_distance: threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: f64) -> Lattice {
        Lattice::centered(2, h, 1.0).unwrap()
    }

    /// Independent oracle: minimise `u + (a/2)|x-y|^2` over a fine grid of
    /// the unit ball, with `u` given analytically.
    fn oracle_min(u: impl Fn(f64, f64) -> f64, a: f64, y: [f64; 2], m: usize) -> (f64, [f64; 2]) {
        let mut best = (f64::INFINITY, [0.0, 0.0]);
        for i in 0..=m {
            for j in 0..=m {
                let x = -1.0 + 2.0 * i as f64 / m as f64;
                let z = -1.0 + 2.0 * j as f64 / m as f64;
                if x * x + z * z > 1.0 {
                    continue;
                }
                let v = u(x, z) + 0.5 * a * ((x - y[0]).powi(2) + (z - y[1]).powi(2));
                if v < best.0 {
                    best = (v, [x, z]);
                }
            }
        }
        best
    }

    #[test]
    fn zero_function_touches_at_vertex() {
        let lat = grid(0.0625);
        let u = GridFunction::constant(&lat, 0.0).unwrap();
        let rec = slide_to_touch(&u, 1.0, &[0.0, 0.0]).unwrap();
        assert_eq!(rec.paraboloid.offset, 0.0);
        assert_eq!(rec.contact_point, vec![0.0, 0.0]);
        assert!(rec.admissible);
    }

    #[test]
    fn quadratic_contact_matches_oracle() {
        let h = 0.5f64.powi(6);
        let lat = grid(h);
        let u = GridFunction::from_fn(&lat, |p| p[0] * p[0] + p[1] * p[1]).unwrap();
        let rec = slide_to_touch(&u, 1.0, &[0.3, 0.0]).unwrap();
        let (c, z) = oracle_min(|x, y| x * x + y * y, 1.0, [0.3, 0.0], 3000);
        assert!((z[0] - 0.1).abs() < 1e-3 && z[1].abs() < 1e-3);
        assert!((c - 0.03).abs() < 1e-6);
        assert!((rec.contact_point[0] - 0.1).abs() <= h);
        assert_eq!(rec.contact_point[1], 0.0);
        assert!((rec.paraboloid.offset - 0.03).abs() <= 2.0 * h * h);
    }

    #[test]
    fn constant_one_is_inadmissible() {
        let lat = grid(0.125);
        let u = GridFunction::constant(&lat, 1.0).unwrap();
        let rec = slide_to_touch(&u, 1.0, &[0.0, 0.0]).unwrap();
        assert_eq!(rec.paraboloid.offset, 1.0);
        assert!(!rec.admissible);
        assert_eq!(Paraboloid::offset_bound(1.0, &[0.0, 0.0]), 9.0 / 32.0);
    }

    #[test]
    fn vertex_outside_three_quarters_rejected() {
        let lat = grid(0.125);
        let u = GridFunction::constant(&lat, 0.0).unwrap();
        assert!(slide_to_touch(&u, 1.0, &[0.8, 0.0]).is_err());
        assert!(contact_set(&u, 1.0, &[]).is_err());
    }

    #[test]
    fn zero_function_contact_set_is_vertex_set() {
        let lat = grid(0.0625);
        let u = GridFunction::constant(&lat, 0.0).unwrap();
        let verts = lattice_vertices(&lat, 0.5);
        let set = contact_set(&u, 1.0, &verts).unwrap();
        let expect: Vec<usize> = verts.iter().map(|y| lat.node_at(y).unwrap()).collect();
        assert_eq!(set.nodes(), expect.as_slice());
        for r in &set.records {
            assert_eq!(r.contact_point, r.paraboloid.vertex);
        }
    }

    #[test]
    fn quadratic_contact_points_are_vertex_thirds() {
        let h = 0.5f64.powi(6);
        let lat = grid(h);
        let u = GridFunction::from_fn(&lat, |p| p[0] * p[0] + p[1] * p[1]).unwrap();
        let verts = lattice_vertices(&lat, 0.75);
        let set = contact_set(&u, 1.0, &verts).unwrap();
        for r in &set.records {
            for axis in 0..2 {
                let expect = r.paraboloid.vertex[axis] / 3.0;
                assert!((r.contact_point[axis] - expect).abs() <= h);
            }
        }
    }

    #[test]
    fn envelope_transform_matches_direct_minimisation() {
        let h = 0.5f64.powi(5);
        let lat = grid(h);
        let u = GridFunction::from_fn(&lat, |p| {
            (3.1 * p[0]).sin() * (2.3 * p[1] + 0.4).cos() + 0.3 * p[0] * p[1] + 1.0
        })
        .unwrap();
        let verts = lattice_vertices(&lat, 0.75);
        for a in [0.5, 2.0, 9.0] {
            let fast = contact_set(&u, a, &verts).unwrap();
            let slow = contact_set_brute_force(&u, a, &verts).unwrap();
            for (f, s) in fast.records.iter().zip(&slow.records) {
                assert!((f.paraboloid.offset - s.paraboloid.offset).abs() < 1e-12);
                assert_eq!(f.contact_node, s.contact_node);
            }
            assert_eq!(fast.nodes(), slow.nodes());
        }
    }

    #[test]
    fn contact_sets_grow_with_opening() {
        let h = 0.5f64.powi(5);
        let lat = grid(h);
        let u = GridFunction::from_fn(&lat, |p| p[0] * p[0] + p[1] * p[1]).unwrap();
        let verts = lattice_vertices(&lat, 0.75);
        let small = contact_set(&u, 0.5, &verts).unwrap();
        let large = contact_set(&u, 1.0, &verts).unwrap();
        for &z in small.nodes() {
            let pz = lat.point(z);
            let near = large
                .nodes()
                .iter()
                .any(|&w| dist2(&lat.point(w), &pz).sqrt() <= h * 2f64.sqrt() + 1e-12);
            assert!(near, "{pz:?} has no neighbour in A_1");
        }
    }

    #[test]
    fn dyadic_cover_examples() {
        let lat = grid(0.0625);
        let u = GridFunction::constant(&lat, 0.0).unwrap();
        let set = contact_set(&u, 1.0, &[vec![0.0, 0.0]]).unwrap();
        let cover = dyadic_cover(&set, &lat, 3).unwrap();
        assert_eq!(cover.cubes, vec![DyadicCube::new(3, vec![0, 0])]);
        assert_eq!(cover.measure, 0.5f64.powi(6));

        let set = contact_set(&u, 1.0, &[vec![0.0, 0.0], vec![0.5, 0.5]]).unwrap();
        let cover = dyadic_cover(&set, &lat, 2).unwrap();
        assert_eq!(cover.cubes.len(), 2);

        assert!(dyadic_cover(&set, &lat, 5).is_err());
    }

    #[test]
    fn dyadic_cover_of_zero_function_covers_half_ball() {
        let h = 0.5f64.powi(6);
        let lat = grid(h);
        let u = GridFunction::constant(&lat, 0.0).unwrap();
        let set = contact_set(&u, 1.0, &lattice_vertices(&lat, 0.5)).unwrap();
        let cover = dyadic_cover(&set, &lat, 4).unwrap();
        // enumeration: every level-4 cube holding a node of B_1/2
        let mut expected = BTreeSet::new();
        lat.for_each_in(&Region::ball0(2, 0.5), |_, p| {
            expected.insert(DyadicCube::containing(p, 4));
        });
        for q in &expected {
            assert!(cover.cubes.binary_search(q).is_ok(), "{q:?} missing");
        }
    }

    #[test]
    fn barrier_examples() {
        let b = barrier_profile(2, 1.0, 1.0).unwrap();
        assert_eq!(b.gamma, 4.0);
        assert!((b.beta - 1.0 / 5184.0).abs() < 1e-18);
        assert!((b.beta - 1.9290e-4).abs() < 1e-8);
        assert_eq!(b.tangent_opening, 4.0);
        assert!(b.phi(&[6.0 * 2f64.sqrt(), 0.0]).abs() < 1e-12);
        assert!(b.gap(&[0.6, 0.8]).abs() < 1e-12);
        assert!(barrier_profile(2, 1.0, 0.0).is_err());
        assert!(barrier_profile(2, -1.0, 1.0).is_err());
    }

    #[test]
    fn csv_columns() {
        let lat = grid(0.25);
        let u = GridFunction::constant(&lat, 0.0).unwrap();
        let set = contact_set(&u, 1.0, &[vec![0.25, 0.0]]).unwrap();
        let csv = set.to_csv();
        assert_eq!(csv, "y1,y2,a,c_y,z1,z2,admissible\n0.25,0.0,1.0,0.0,0.25,0.0,true\n");
    }

    #[test]
    fn separation_for_simple_profiles() {
        let h = 0.5f64.powi(6);
        let lat = grid(h);
        let zero = GridFunction::constant(&lat, 0.0).unwrap();
        let verts = lattice_vertices(&lat, 0.5);
        let coarse: Vec<Vec<f64>> = verts.into_iter().step_by(37).collect();
        let rep = vertex_contact_separation(&zero, 1.0, &coarse, 0.1, 1.0).unwrap();
        assert!((rep.min_ratio - 1.0).abs() < 1e-12);
    }
}
