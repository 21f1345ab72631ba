//! Uniform lattices over boxes, regions, counting measure, oscillation and
//! dyadic cubes.
//!
//! Every measure in this crate is counting measure on lattice nodes. A node
//! belongs to a region when its center does; balls are closed, the cubes
//! `Q_rho(x)` are open and dyadic cubes are half-open on their upper faces.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt_f64;

/// Slack used when comparing node coordinates against region boundaries.
const GEOM_EPS: f64 = 1e-12;

/// Axis-aligned box given by its center and half-width along each axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub center: Vec<f64>,
    pub half_widths: Vec<f64>,
}

impl BoxSpec {
    /// The cube `[-w, w]^dim`.
    pub fn centered(dim: usize, half_width: f64) -> Self {
        Self {
            center: vec![0.0; dim],
            half_widths: vec![half_width; dim],
        }
    }
}

/// Uniform lattice `center + spacing * Z^n` restricted to a box.
///
/// Nodes are enumerated lexicographically by their integer index, the first
/// axis being the most significant.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    spacing: f64,
    center: Vec<f64>,
    half: Vec<usize>,
    counts: Vec<usize>,
    strides: Vec<usize>,
    len: usize,
}

/// Builds the lattice of all nodes of `bx` at the given spacing.
pub fn build_lattice(dim: usize, spacing: f64, bx: &BoxSpec) -> Result<Lattice> {
    if dim == 0 {
        return Err(Error::InvalidLattice("dimension must be at least 1".into()));
    }
    if bx.center.len() != dim || bx.half_widths.len() != dim {
        return Err(Error::InvalidLattice(format!(
            "box has {} center and {} half-width entries for dimension {dim}",
            bx.center.len(),
            bx.half_widths.len()
        )));
    }
    if !(spacing.is_finite() && spacing > 0.0) {
        return Err(Error::InvalidLattice(format!("spacing must be positive, got {spacing}")));
    }
    let mut half = Vec::with_capacity(dim);
    for (axis, (&hw, &c)) in bx.half_widths.iter().zip(&bx.center).enumerate() {
        if !c.is_finite() {
            return Err(Error::InvalidLattice(format!("axis {axis}: center is not finite")));
        }
        let k = hw / spacing;
        let kr = k.round();
        if !(hw > 0.0) || !k.is_finite() || kr < 1.0 || (k - kr).abs() > 1e-9 * kr.max(1.0) {
            return Err(Error::InvalidLattice(format!(
                "dimension {dim}, axis {axis}: half-width {hw} is not a positive multiple of spacing {spacing}"
            )));
        }
        half.push(kr as usize);
    }
    let counts: Vec<usize> = half.iter().map(|&k| 2 * k + 1).collect();
    let mut strides = vec![1usize; dim];
    for axis in (0..dim.saturating_sub(1)).rev() {
        strides[axis] = strides[axis + 1] * counts[axis + 1];
    }
    let len = counts.iter().product();
    Ok(Lattice {
        spacing,
        center: bx.center.clone(),
        half,
        counts,
        strides,
        len,
    })
}

impl Lattice {
    /// Lattice over `[-w, w]^dim` centered at the origin.
    pub fn centered(dim: usize, spacing: f64, half_width: f64) -> Result<Self> {
        build_lattice(dim, spacing, &BoxSpec::centered(dim, half_width))
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn box_spec(&self) -> BoxSpec {
        BoxSpec {
            center: self.center.clone(),
            half_widths: self.half.iter().map(|&k| k as f64 * self.spacing).collect(),
        }
    }

    /// Signed offset (in spacings) of the node index `m` along `axis`.
    #[inline]
    pub fn offset(&self, axis: usize, m: usize) -> i64 {
        m as i64 - self.half[axis] as i64
    }

    #[inline]
    pub fn axis_coord(&self, axis: usize, m: usize) -> f64 {
        self.center[axis] + self.offset(axis, m) as f64 * self.spacing
    }

    #[inline]
    pub fn axis_index(&self, idx: usize, axis: usize) -> usize {
        (idx / self.strides[axis]) % self.counts[axis]
    }

    #[inline]
    pub fn coord(&self, idx: usize, axis: usize) -> f64 {
        self.axis_coord(axis, self.axis_index(idx, axis))
    }

    pub fn point_into(&self, idx: usize, out: &mut [f64]) {
        for (axis, o) in out.iter_mut().enumerate() {
            *o = self.coord(idx, axis);
        }
    }

    pub fn point(&self, idx: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.dim()];
        self.point_into(idx, &mut p);
        p
    }

    pub fn multi_index(&self, idx: usize) -> Vec<usize> {
        (0..self.dim()).map(|a| self.axis_index(idx, a)).collect()
    }

    pub fn linear_index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.strides).map(|(m, s)| m * s).sum()
    }

    /// Node reached from `idx` by `delta` steps along `axis`, if inside the box.
    #[inline]
    pub fn step(&self, idx: usize, axis: usize, delta: i64) -> Option<usize> {
        let m = self.axis_index(idx, axis) as i64 + delta;
        if m < 0 || m >= self.counts[axis] as i64 {
            None
        } else {
            Some((idx as i64 + delta * self.strides[axis] as i64) as usize)
        }
    }

    /// True when `idx` has both axis neighbours along every axis.
    pub fn is_interior(&self, idx: usize) -> bool {
        (0..self.dim()).all(|a| {
            let m = self.axis_index(idx, a);
            m > 0 && m + 1 < self.counts[a]
        })
    }

    /// The node whose coordinates equal `point` (up to rounding), if any.
    pub fn node_at(&self, point: &[f64]) -> Option<usize> {
        if point.len() != self.dim() {
            return None;
        }
        let mut idx = 0;
        for (axis, &x) in point.iter().enumerate() {
            let t = (x - self.center[axis]) / self.spacing + self.half[axis] as f64;
            let m = t.round();
            if (t - m).abs() > 1e-7 || m < 0.0 || m >= self.counts[axis] as f64 {
                return None;
            }
            idx += m as usize * self.strides[axis];
        }
        Some(idx)
    }

    /// Inclusive range of axis indices whose coordinate lies in `[lo, hi]`.
    fn axis_range(&self, axis: usize, lo: f64, hi: f64) -> Option<(usize, usize)> {
        let h = self.spacing;
        let c = self.center[axis];
        let k = self.half[axis] as f64;
        let first = ((lo - c) / h + k - 1e-9).ceil().max(0.0);
        let last = ((hi - c) / h + k + 1e-9).floor().min((self.counts[axis] - 1) as f64);
        if first > last {
            None
        } else {
            Some((first as usize, last as usize))
        }
    }

    /// Calls `f(index, point)` for every node of `region`, in lexicographic order.
    pub fn for_each_in<F: FnMut(usize, &[f64])>(&self, region: &Region, mut f: F) {
        let dim = self.dim();
        let (lo, hi) = region.bounds();
        let mut ranges = Vec::with_capacity(dim);
        for axis in 0..dim {
            match self.axis_range(axis, lo[axis], hi[axis]) {
                Some(r) => ranges.push(r),
                None => return,
            }
        }
        let mut m: Vec<usize> = ranges.iter().map(|r| r.0).collect();
        let mut p: Vec<f64> = (0..dim).map(|a| self.axis_coord(a, m[a])).collect();
        loop {
            if region.contains(&p) {
                f(self.linear_index(&m), &p);
            }
            // odometer increment, last axis fastest
            let mut axis = dim;
            loop {
                if axis == 0 {
                    return;
                }
                axis -= 1;
                if m[axis] < ranges[axis].1 {
                    m[axis] += 1;
                    p[axis] = self.axis_coord(axis, m[axis]);
                    break;
                }
                m[axis] = ranges[axis].0;
                p[axis] = self.axis_coord(axis, m[axis]);
            }
        }
    }

    /// Indices of the nodes of `region`, in lexicographic order.
    pub fn nodes_in(&self, region: &Region) -> Vec<usize> {
        let mut out = Vec::new();
        self.for_each_in(region, |i, _| out.push(i));
        out
    }
}

/// A region of space; membership is decided on node centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Region {
    /// Closed ball `{|x - center| <= radius}`.
    Ball { center: Vec<f64>, radius: f64 },
    /// Open cube `{|x_i - center_i| < side / 2}`.
    Cube { center: Vec<f64>, side: f64 },
    /// Half-open dyadic cube.
    Dyadic(DyadicCube),
}

impl Region {
    pub fn ball(center: &[f64], radius: f64) -> Self {
        Region::Ball {
            center: center.to_vec(),
            radius,
        }
    }

    /// Closed ball of the given radius about the origin.
    pub fn ball0(dim: usize, radius: f64) -> Self {
        Region::Ball {
            center: vec![0.0; dim],
            radius,
        }
    }

    pub fn cube(center: &[f64], side: f64) -> Self {
        Region::Cube {
            center: center.to_vec(),
            side,
        }
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        match self {
            Region::Ball { center, radius } => {
                let d2: f64 = p.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt() <= radius + GEOM_EPS * radius.max(1.0)
            }
            Region::Cube { center, side } => p
                .iter()
                .zip(center)
                .all(|(a, b)| (a - b).abs() < side / 2.0 - GEOM_EPS),
            Region::Dyadic(q) => q.contains(p),
        }
    }

    /// Axis-aligned bounding box `(lo, hi)`.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Region::Ball { center, radius } => (
                center.iter().map(|c| c - radius).collect(),
                center.iter().map(|c| c + radius).collect(),
            ),
            Region::Cube { center, side } => (
                center.iter().map(|c| c - side / 2.0).collect(),
                center.iter().map(|c| c + side / 2.0).collect(),
            ),
            Region::Dyadic(q) => {
                let s = q.side();
                (
                    q.index.iter().map(|&i| i as f64 * s).collect(),
                    q.index.iter().map(|&i| (i + 1) as f64 * s).collect(),
                )
            }
        }
    }
}

/// Dyadic cube `prod_i [k_i 2^-l, (k_i + 1) 2^-l)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DyadicCube {
    pub level: u32,
    pub index: Vec<i64>,
}

impl DyadicCube {
    pub fn new(level: u32, index: Vec<i64>) -> Self {
        Self { level, index }
    }

    pub fn dim(&self) -> usize {
        self.index.len()
    }

    pub fn side(&self) -> f64 {
        dyadic_side(self.level)
    }

    /// The level-`level` cube containing `p`.
    pub fn containing(p: &[f64], level: u32) -> Self {
        let s = dyadic_side(level);
        Self {
            level,
            index: p.iter().map(|&x| (x / s + 1e-9).floor() as i64).collect(),
        }
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        let s = self.side();
        p.iter().zip(&self.index).all(|(&x, &k)| {
            let lo = k as f64 * s;
            x >= lo - GEOM_EPS && x < lo + s - GEOM_EPS
        })
    }

    pub fn closure_contains(&self, p: &[f64]) -> bool {
        let s = self.side();
        p.iter().zip(&self.index).all(|(&x, &k)| {
            let lo = k as f64 * s;
            x >= lo - GEOM_EPS && x <= lo + s + GEOM_EPS
        })
    }

    pub fn measure(&self) -> f64 {
        self.side().powi(self.dim() as i32)
    }

    pub fn center(&self) -> Vec<f64> {
        let s = self.side();
        self.index.iter().map(|&k| (k as f64 + 0.5) * s).collect()
    }
}

pub fn dyadic_side(level: u32) -> f64 {
    0.5f64.powi(level as i32)
}

/// All level-`level` cubes tiling `root`, in lexicographic index order.
pub fn dyadic_cubes_at_level(level: u32, root: &DyadicCube) -> Result<Vec<DyadicCube>> {
    if level < root.level {
        return Err(Error::InvalidParameter(format!(
            "level {level} is coarser than the root level {}",
            root.level
        )));
    }
    let shift = level - root.level;
    if shift >= 62 {
        return Err(Error::InvalidParameter(format!("level gap {shift} too large")));
    }
    let per_axis = 1i64 << shift;
    let dim = root.dim();
    let total = (per_axis as usize).pow(dim as u32);
    let mut out = Vec::with_capacity(total);
    let mut m = vec![0i64; dim];
    for _ in 0..total {
        out.push(DyadicCube {
            level,
            index: root
                .index
                .iter()
                .zip(&m)
                .map(|(&k, &j)| k * per_axis + j)
                .collect(),
        });
        for axis in (0..dim).rev() {
            m[axis] += 1;
            if m[axis] < per_axis {
                break;
            }
            m[axis] = 0;
        }
    }
    Ok(out)
}

/// Scalar function sampled at every node of a lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    lattice: Lattice,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(lattice: Lattice, values: Vec<f64>) -> Result<Self> {
        if values.len() != lattice.len() {
            return Err(Error::GridMismatch(format!(
                "{} values for a lattice of {} nodes",
                values.len(),
                lattice.len()
            )));
        }
        if let Some(node) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { node });
        }
        Ok(Self { lattice, values })
    }

    pub fn from_fn(lattice: &Lattice, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let mut p = vec![0.0; lattice.dim()];
        let values = (0..lattice.len())
            .map(|i| {
                lattice.point_into(i, &mut p);
                f(&p)
            })
            .collect();
        Self::new(lattice.clone(), values)
    }

    pub fn constant(lattice: &Lattice, c: f64) -> Result<Self> {
        Self::new(lattice.clone(), vec![c; lattice.len()])
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn value(&self, idx: usize) -> f64 {
        self.values[idx]
    }

    /// `s * u + c`, node by node.
    pub fn affine(&self, s: f64, c: f64) -> Self {
        Self {
            lattice: self.lattice.clone(),
            values: self.values.iter().map(|v| s * v + c).collect(),
        }
    }

    /// Writes the text table: a `# dim=.. h=.. box=..` header, then one
    /// `x1 .. xn value` row per node in lexicographic order.
    pub fn write_table<W: Write>(&self, mut w: W) -> Result<()> {
        let lat = &self.lattice;
        writeln!(w, "{}", table_header(lat))?;
        let mut p = vec![0.0; lat.dim()];
        let mut line = String::new();
        for (i, v) in self.values.iter().enumerate() {
            lat.point_into(i, &mut p);
            line.clear();
            for x in &p {
                let _ = write!(line, "{} ", fmt_f64(*x));
            }
            line.push_str(&fmt_f64(*v));
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn to_table_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_table(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("utf8 table")
    }

    /// Parses the format produced by [`GridFunction::write_table`].
    pub fn read_table<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty input".into(),
        })?;
        let lattice = parse_header(&header?)?;
        let dim = lattice.dim();
        let mut values = Vec::with_capacity(lattice.len());
        let mut p = vec![0.0; dim];
        for (lineno, line) in lines {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let perr = |msg: String| Error::Parse { line: lineno + 1, msg };
            if fields.len() != dim + 1 {
                return Err(perr(format!("expected {} columns, found {}", dim + 1, fields.len())));
            }
            let idx = values.len();
            if idx >= lattice.len() {
                return Err(perr("more rows than lattice nodes".into()));
            }
            lattice.point_into(idx, &mut p);
            for axis in 0..dim {
                let x: f64 = fields[axis].parse().map_err(|e| perr(format!("{e}")))?;
                if (x - p[axis]).abs() > 1e-9 * lattice.spacing() {
                    return Err(Error::GridMismatch(format!(
                        "line {}: coordinate {x} does not match node coordinate {}",
                        lineno + 1,
                        p[axis]
                    )));
                }
            }
            values.push(fields[dim].parse().map_err(|e| perr(format!("{e}")))?);
        }
        if values.len() != lattice.len() {
            return Err(Error::GridMismatch(format!(
                "{} rows for a lattice of {} nodes",
                values.len(),
                lattice.len()
            )));
        }
        GridFunction::new(lattice, values)
    }
}

/// `# dim=<n> h=<h> box=[lo,hi]x[lo,hi]...`
pub fn table_header(lat: &Lattice) -> String {
    let bx = lat.box_spec();
    let ranges: Vec<String> = bx
        .center
        .iter()
        .zip(&bx.half_widths)
        .map(|(c, w)| format!("[{},{}]", fmt_f64(c - w), fmt_f64(c + w)))
        .collect();
    format!("# dim={} h={} box={}", lat.dim(), fmt_f64(lat.spacing()), ranges.join("x"))
}

fn parse_header(line: &str) -> Result<Lattice> {
    let perr = |msg: &str| Error::Parse {
        line: 1,
        msg: msg.to_string(),
    };
    let body = line.strip_prefix('#').ok_or_else(|| perr("header must start with '#'"))?;
    let mut dim = None;
    let mut h = None;
    let mut bx = None;
    for tok in body.split_whitespace() {
        if let Some(v) = tok.strip_prefix("dim=") {
            dim = Some(v.parse::<usize>().map_err(|_| perr("bad dim"))?);
        } else if let Some(v) = tok.strip_prefix("h=") {
            h = Some(v.parse::<f64>().map_err(|_| perr("bad h"))?);
        } else if let Some(v) = tok.strip_prefix("box=") {
            let mut center = Vec::new();
            let mut half = Vec::new();
            for part in v.split('x') {
                let inner = part
                    .strip_prefix('[')
                    .and_then(|s| s.strip_suffix(']'))
                    .ok_or_else(|| perr("bad box range"))?;
                let (a, b) = inner.split_once(',').ok_or_else(|| perr("bad box range"))?;
                let lo: f64 = a.parse().map_err(|_| perr("bad box bound"))?;
                let hi: f64 = b.parse().map_err(|_| perr("bad box bound"))?;
                center.push((lo + hi) / 2.0);
                half.push((hi - lo) / 2.0);
            }
            bx = Some(BoxSpec {
                center,
                half_widths: half,
            });
        }
    }
    let (dim, h, bx) = match (dim, h, bx) {
        (Some(d), Some(h), Some(b)) => (d, h, b),
        _ => return Err(perr("header needs dim=, h= and box=")),
    };
    build_lattice(dim, h, &bx)
}

/// Fraction of the nodes of `region` satisfying `indicator`.
pub fn measure_fraction<F>(lattice: &Lattice, region: &Region, indicator: F) -> Result<f64>
where
    F: Fn(usize, &[f64]) -> bool,
{
    let mut total = 0usize;
    let mut hit = 0usize;
    lattice.for_each_in(region, |i, p| {
        total += 1;
        if indicator(i, p) {
            hit += 1;
        }
    });
    if total == 0 {
        return Err(Error::EmptyRegion(format!("{region:?}")));
    }
    Ok(hit as f64 / total as f64)
}

/// `max u - min u` over the nodes of `region`.
pub fn oscillation(u: &GridFunction, region: &Region) -> Result<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    u.lattice().for_each_in(region, |i, _| {
        let v = u.value(i);
        lo = lo.min(v);
        hi = hi.max(v);
    });
    if lo > hi {
        return Err(Error::EmptyRegion(format!("{region:?}")));
    }
    Ok(hi - lo)
}
