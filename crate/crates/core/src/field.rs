//! Cuboid grids, space-time scalar fields and virtual sensors.
//!
//! Node `(l, w, d)` sits at `(l·Δx, w·Δy, d·Δz)`; `z` points up, so `d = 0`
//! is the bottom face and `d = N_D - 1` the soil surface. Space-time arrays
//! are flat with `t` outermost, then `z`, `y`, and `x` innermost.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("truth field is identically zero")]
    ZeroTruth,
    #[error("malformed field file: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid3D {
    /// Extent along x, cm.
    pub length: f64,
    /// Extent along y, cm.
    pub width: f64,
    /// Extent along z, cm.
    pub depth: f64,
    pub nl: usize,
    pub nw: usize,
    pub nd: usize,
}

impl Grid3D {
    pub fn new(length: f64, width: f64, depth: f64, nl: usize, nw: usize, nd: usize) -> Result<Self, FieldError> {
        if nl < 2 || nw < 2 || nd < 2 {
            return Err(FieldError::Config(format!("every axis needs at least 2 nodes, got {nl}x{nw}x{nd}")));
        }
        if !(length > 0.0 && width > 0.0 && depth > 0.0) || !(length * width * depth).is_finite() {
            return Err(FieldError::Config("grid extents must be positive and finite".into()));
        }
        Ok(Self { length, width, depth, nl, nw, nd })
    }

    pub fn dx(&self) -> f64 {
        self.length / (self.nl - 1) as f64
    }
    pub fn dy(&self) -> f64 {
        self.width / (self.nw - 1) as f64
    }
    pub fn dz(&self) -> f64 {
        self.depth / (self.nd - 1) as f64
    }

    pub fn n_nodes(&self) -> usize {
        self.nl * self.nw * self.nd
    }

    pub fn n_columns(&self) -> usize {
        self.nl * self.nw
    }

    #[inline]
    pub fn node_index(&self, l: usize, w: usize, d: usize) -> usize {
        (d * self.nw + w) * self.nl + l
    }

    #[inline]
    pub fn node_coords(&self, idx: usize) -> (usize, usize, usize) {
        let l = idx % self.nl;
        let w = (idx / self.nl) % self.nw;
        let d = idx / (self.nl * self.nw);
        (l, w, d)
    }

    #[inline]
    pub fn position(&self, l: usize, w: usize, d: usize) -> [f64; 3] {
        [l as f64 * self.dx(), w as f64 * self.dy(), d as f64 * self.dz()]
    }

    pub fn contains(&self, l: usize, w: usize, d: usize) -> bool {
        l < self.nl && w < self.nw && d < self.nd
    }

    /// Node at a physical position, if it lies on the lattice.
    pub fn locate(&self, p: [f64; 3]) -> Option<(usize, usize, usize)> {
        let snap = |x: f64, h: f64, n: usize| {
            let k = (x / h).round();
            let ok = k >= 0.0 && (k as usize) < n && (x - k * h).abs() <= 1e-9 * h.max(1.0);
            ok.then_some(k as usize)
        };
        Some((snap(p[0], self.dx(), self.nl)?, snap(p[1], self.dy(), self.nw)?, snap(p[2], self.dz(), self.nd)?))
    }
}

/// Uniformly spaced output instants `start + j·interval`, `j = 0..count`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub start: f64,
    pub interval: f64,
    pub count: usize,
}

impl TimeGrid {
    pub fn new(start: f64, interval: f64, count: usize) -> Result<Self, FieldError> {
        if count < 2 {
            return Err(FieldError::Config(format!("need at least 2 time instances, got {count}")));
        }
        if !(interval > 0.0) || !start.is_finite() || !interval.is_finite() {
            return Err(FieldError::Config("time interval must be positive and finite".into()));
        }
        Ok(Self { start, interval, count })
    }

    pub fn instant(&self, j: usize) -> f64 {
        self.start + j as f64 * self.interval
    }

    pub fn end(&self) -> f64 {
        self.instant(self.count - 1)
    }

    pub fn instants(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.count).map(|j| self.instant(j))
    }

    pub fn locate(&self, t: f64) -> Option<usize> {
        let k = ((t - self.start) / self.interval).round();
        let ok = k >= 0.0 && (k as usize) < self.count && (t - self.instant(k as usize)).abs() <= 1e-9 * self.interval;
        ok.then_some(k as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    /// ψ in cm.
    PressureHead,
    /// θ, dimensionless.
    Moisture,
}

impl Quantity {
    fn tag(self) -> &'static str {
        match self {
            Quantity::PressureHead => "pressure_head",
            Quantity::Moisture => "moisture",
        }
    }
    fn from_tag(s: &str) -> Option<Self> {
        match s {
            "pressure_head" => Some(Self::PressureHead),
            "moisture" => Some(Self::Moisture),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatioTemporalField {
    pub grid: Grid3D,
    pub times: TimeGrid,
    pub quantity: Quantity,
    values: Vec<f64>,
}

impl SpatioTemporalField {
    pub fn new(grid: Grid3D, times: TimeGrid, quantity: Quantity, values: Vec<f64>) -> Result<Self, FieldError> {
        let want = grid.n_nodes() * times.count;
        if values.len() != want {
            return Err(FieldError::Dimension(format!("expected {want} values, got {}", values.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FieldError::Dimension(format!("value {i} is not finite")));
        }
        Ok(Self { grid, times, quantity, values })
    }

    pub fn from_fn(
        grid: Grid3D,
        times: TimeGrid,
        quantity: Quantity,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Result<Self, FieldError> {
        let mut values = Vec::with_capacity(grid.n_nodes() * times.count);
        for t in 0..times.count {
            for d in 0..grid.nd {
                for w in 0..grid.nw {
                    for l in 0..grid.nl {
                        values.push(f(t, l, w, d));
                    }
                }
            }
        }
        Self::new(grid, times, quantity, values)
    }

    #[inline]
    pub fn flatten(&self, t: usize, l: usize, w: usize, d: usize) -> usize {
        flatten(&self.grid, t, l, w, d)
    }

    pub fn get(&self, t: usize, l: usize, w: usize, d: usize) -> f64 {
        self.values[self.flatten(t, l, w, d)]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Nodal values at output instant `t`.
    pub fn snapshot(&self, t: usize) -> &[f64] {
        let n = self.grid.n_nodes();
        &self.values[t * n..(t + 1) * n]
    }

    pub fn map(&self, quantity: Quantity, f: impl Fn(f64) -> f64) -> Result<Self, FieldError> {
        Self::new(self.grid, self.times, quantity, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn write(&self, path: &Path) -> Result<(), FieldError> {
        let mut out = BufWriter::new(File::create(path)?);
        let g = &self.grid;
        let tg = &self.times;
        writeln!(out, "# rootzone field v1")?;
        writeln!(out, "quantity = {}", self.quantity.tag())?;
        writeln!(out, "nl = {}", g.nl)?;
        writeln!(out, "nw = {}", g.nw)?;
        writeln!(out, "nd = {}", g.nd)?;
        writeln!(out, "count = {}", tg.count)?;
        writeln!(out, "length = {}", g.length)?;
        writeln!(out, "width = {}", g.width)?;
        writeln!(out, "depth = {}", g.depth)?;
        writeln!(out, "start = {}", tg.start)?;
        writeln!(out, "interval = {}", tg.interval)?;
        writeln!(out, "end = {}", tg.end())?;
        writeln!(out, "---")?;
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, FieldError> {
        let mut input = BufReader::new(File::open(path)?);
        let header = read_header(&mut input)?;
        let get = |k: &str| header.get(k).ok_or_else(|| FieldError::Format(format!("missing header key `{k}`")));
        let num = |k: &str| -> Result<f64, FieldError> {
            get(k)?.parse().map_err(|_| FieldError::Format(format!("bad number for `{k}`")))
        };
        let count = |k: &str| -> Result<usize, FieldError> {
            get(k)?.parse().map_err(|_| FieldError::Format(format!("bad count for `{k}`")))
        };
        let quantity =
            Quantity::from_tag(get("quantity")?).ok_or_else(|| FieldError::Format("unknown quantity tag".into()))?;
        let grid = Grid3D::new(num("length")?, num("width")?, num("depth")?, count("nl")?, count("nw")?, count("nd")?)?;
        let times = TimeGrid::new(num("start")?, num("interval")?, count("count")?)?;
        let n = grid.n_nodes() * times.count;
        let mut bytes = Vec::with_capacity(n * 8);
        input.read_to_end(&mut bytes)?;
        if bytes.len() != n * 8 {
            return Err(FieldError::Format(format!("expected {} payload bytes, found {}", n * 8, bytes.len())));
        }
        let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Self::new(grid, times, quantity, values)
    }
}

/// Reads `key = value` lines up to the `---` separator.
pub(crate) fn read_header(input: &mut impl BufRead) -> Result<std::collections::BTreeMap<String, String>, FieldError> {
    let mut map = std::collections::BTreeMap::new();
    let mut line = String::new();
    loop {
        line.clear();
        if input.read_line(&mut line)? == 0 {
            return Err(FieldError::Format("header separator `---` not found".into()));
        }
        let s = line.trim_end_matches(['\n', '\r']);
        if s == "---" {
            return Ok(map);
        }
        if s.starts_with('#') || s.trim().is_empty() {
            continue;
        }
        let (k, v) = s.split_once('=').ok_or_else(|| FieldError::Format(format!("bad header line `{s}`")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
}

#[inline]
pub fn flatten(grid: &Grid3D, t: usize, l: usize, w: usize, d: usize) -> usize {
    t * grid.n_nodes() + grid.node_index(l, w, d)
}

pub fn unflatten(grid: &Grid3D, idx: usize) -> (usize, usize, usize, usize) {
    let n = grid.n_nodes();
    let (l, w, d) = grid.node_coords(idx % n);
    (idx / n, l, w, d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    InitialRandom,
    ActiveLearning,
    RandomBaseline,
}

impl Provenance {
    pub fn tag(self) -> &'static str {
        match self {
            Provenance::InitialRandom => "initial-random",
            Provenance::ActiveLearning => "active-learning",
            Provenance::RandomBaseline => "random-baseline",
        }
    }
    pub fn from_tag(s: &str) -> Option<Self> {
        match s {
            "initial-random" => Some(Self::InitialRandom),
            "active-learning" => Some(Self::ActiveLearning),
            "random-baseline" => Some(Self::RandomBaseline),
            _ => None,
        }
    }
}

/// A horizontal sensor location with its vertical sensor string.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Column {
    pub l: usize,
    pub w: usize,
    pub depths: [usize; 5],
    pub provenance: Provenance,
}

/// Ordered, duplicate-free list of instrumented columns.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PlacementPlan {
    columns: Vec<Column>,
}

impl PlacementPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, column: Column) -> Result<(), FieldError> {
        if self.contains(column.l, column.w) {
            return Err(FieldError::Config(format!("location ({}, {}) already instrumented", column.l, column.w)));
        }
        let mut d = column.depths;
        d.sort_unstable();
        if d.windows(2).any(|p| p[0] == p[1]) {
            return Err(FieldError::Config("depth indices within a column must be distinct".into()));
        }
        self.columns.push(column);
        Ok(())
    }

    pub fn contains(&self, l: usize, w: usize) -> bool {
        self.columns.iter().any(|c| c.l == l && c.w == w)
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn locations(&self) -> Vec<(usize, usize)> {
        self.columns.iter().map(|c| (c.l, c.w)).collect()
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    /// The first `k` columns.
    pub fn truncated(&self, k: usize) -> Self {
        Self { columns: self.columns[..k.min(self.columns.len())].to_vec() }
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), FieldError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["order", "l", "w", "provenance"])?;
        for (i, c) in self.columns.iter().enumerate() {
            w.write_record([i.to_string(), c.l.to_string(), c.w.to_string(), c.provenance.tag().to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads `order,l,w,provenance`; depth strings are rebuilt from `grid`.
    pub fn read_csv(path: &Path, grid: &Grid3D) -> Result<Self, FieldError> {
        let depths = uniform_depth_column(grid)?;
        let mut r = csv::Reader::from_path(path)?;
        let mut rows: Vec<(usize, Column)> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).ok_or_else(|| FieldError::Format("short placement row".into()));
            let int = |i: usize| -> Result<usize, FieldError> {
                field(i)?.trim().parse().map_err(|_| FieldError::Format("bad integer in placement row".into()))
            };
            let (order, l, w) = (int(0)?, int(1)?, int(2)?);
            if !grid.contains(l, w, 0) {
                return Err(FieldError::Index(format!("location ({l}, {w}) outside grid")));
            }
            let provenance = Provenance::from_tag(field(3)?.trim())
                .ok_or_else(|| FieldError::Format("unknown provenance tag".into()))?;
            rows.push((order, Column { l, w, depths, provenance }));
        }
        rows.sort_by_key(|r| r.0);
        let mut plan = Self::new();
        for (_, c) in rows {
            plan.push(c)?;
        }
        Ok(plan)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub node: (usize, usize, usize),
    pub time: usize,
    pub theta_m: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub records: Vec<Observation>,
    pub sigma: f64,
    pub seed: u64,
}

impl ObservationSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_csv(&self, path: &Path, grid: &Grid3D, times: &TimeGrid) -> Result<(), FieldError> {
        let mut f = BufWriter::new(File::create(path)?);
        writeln!(f, "# sigma={} seed={}", self.sigma, self.seed)?;
        let mut w = csv::Writer::from_writer(f);
        w.write_record(["t", "x", "y", "z", "theta_m"])?;
        for o in &self.records {
            let p = grid.position(o.node.0, o.node.1, o.node.2);
            w.write_record([
                times.instant(o.time).to_string(),
                p[0].to_string(),
                p[1].to_string(),
                p[2].to_string(),
                o.theta_m.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, grid: &Grid3D, times: &TimeGrid) -> Result<Self, FieldError> {
        let text = std::fs::read_to_string(path)?;
        let (mut sigma, mut seed) = (f64::NAN, 0u64);
        if let Some(meta) = text.lines().next().and_then(|l| l.strip_prefix('#')) {
            for kv in meta.split_whitespace() {
                match kv.split_once('=') {
                    Some(("sigma", v)) => sigma = v.parse().unwrap_or(f64::NAN),
                    Some(("seed", v)) => seed = v.parse().unwrap_or(0),
                    _ => {}
                }
            }
        }
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let mut records = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64, FieldError> {
                rec.get(i)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| FieldError::Format("bad observation row".into()))
            };
            let (t, x, y, z, theta_m) = (num(0)?, num(1)?, num(2)?, num(3)?, num(4)?);
            let node = grid
                .locate([x, y, z])
                .ok_or_else(|| FieldError::Index(format!("observation at ({x}, {y}, {z}) is not a grid node")))?;
            let time = times.locate(t).ok_or_else(|| FieldError::Index(format!("time {t} is not an output instant")))?;
            records.push(Observation { node, time, theta_m });
        }
        Ok(Self { records, sigma, seed })
    }
}

/// Noisy full time series at every sensor of `plan`.
///
/// Each column draws from its own stream keyed by its location, so adding a
/// column never changes the noise already drawn for earlier ones.
pub fn observe(
    truth: &SpatioTemporalField,
    plan: &PlacementPlan,
    sigma: f64,
    seed: u64,
) -> Result<ObservationSet, FieldError> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(FieldError::Config(format!("noise level must be non-negative, got {sigma}")));
    }
    let g = &truth.grid;
    let mut records = Vec::with_capacity(plan.len() * 5 * truth.times.count);
    for c in plan.columns() {
        for &d in &c.depths {
            if !g.contains(c.l, c.w, d) {
                return Err(FieldError::Index(format!("sensor ({}, {}, {d}) outside grid", c.l, c.w)));
            }
        }
        let mut rng = seed::rng(seed::child(seed, &format!("column:{}:{}", c.l, c.w)));
        let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("valid normal");
        for &d in &c.depths {
            for t in 0..truth.times.count {
                let eps = if sigma == 0.0 { 0.0 } else { normal.sample(&mut rng) };
                records.push(Observation { node: (c.l, c.w, d), time: t, theta_m: truth.get(t, c.l, c.w, d) + eps });
            }
        }
    }
    Ok(ObservationSet { records, sigma, seed })
}

/// ‖θ̂ − θ‖₂ / ‖θ‖₂ over the whole space-time array.
pub fn relative_error(estimate: &SpatioTemporalField, truth: &SpatioTemporalField) -> Result<f64, FieldError> {
    if estimate.grid != truth.grid || estimate.times != truth.times || estimate.quantity != truth.quantity {
        return Err(FieldError::Dimension("estimate and truth differ in grid, time grid or quantity".into()));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (a, b) in estimate.values.iter().zip(&truth.values) {
        num += (a - b) * (a - b);
        den += b * b;
    }
    if den == 0.0 {
        return Err(FieldError::ZeroTruth);
    }
    Ok((num / den).sqrt())
}

/// Five depth indices `round(k·(N_D−1)/4)`, halves rounded away from zero.
pub fn uniform_depth_column(grid: &Grid3D) -> Result<[usize; 5], FieldError> {
    if grid.nd < 5 {
        return Err(FieldError::Config(format!("need at least 5 depth nodes for a sensor string, got {}", grid.nd)));
    }
    let span = (grid.nd - 1) as f64;
    Ok(std::array::from_fn(|k| (k as f64 * span / 4.0).round() as usize))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(nl: usize, nw: usize, nd: usize) -> Grid3D {
        Grid3D::new(100.0, 100.0, 50.0, nl, nw, nd).unwrap()
    }

    fn column(l: usize, w: usize, g: &Grid3D) -> Column {
        Column { l, w, depths: uniform_depth_column(g).unwrap(), provenance: Provenance::InitialRandom }
    }

    #[test]
    fn depth_columns() {
        assert_eq!(uniform_depth_column(&grid(2, 2, 10)).unwrap(), [0, 2, 5, 7, 9]);
        assert_eq!(uniform_depth_column(&grid(2, 2, 5)).unwrap(), [0, 1, 2, 3, 4]);
        assert_eq!(uniform_depth_column(&grid(2, 2, 9)).unwrap(), [0, 2, 4, 6, 8]);
        assert!(matches!(uniform_depth_column(&grid(2, 2, 4)), Err(FieldError::Config(_))));
    }

    #[test]
    fn grid_validation_and_coordinates() {
        assert!(Grid3D::new(1.0, 1.0, 1.0, 1, 2, 2).is_err());
        let g = grid(20, 20, 10);
        assert_eq!(g.n_nodes(), 4000);
        let p = g.position(3, 4, 9);
        assert!((p[0] - 3.0 * 100.0 / 19.0).abs() < 1e-12);
        assert!((p[2] - 50.0).abs() < 1e-12);
        assert_eq!(g.locate(p), Some((3, 4, 9)));
        assert_eq!(g.locate([1.0, 0.0, 0.0]), None);
        assert!(TimeGrid::new(0.0, 1.0, 1).is_err());
    }

    #[test]
    fn zero_noise_is_restriction() {
        let g = grid(3, 3, 5);
        let tg = TimeGrid::new(0.0, 10.0, 4).unwrap();
        let truth = SpatioTemporalField::from_fn(g, tg, Quantity::Moisture, |t, l, w, d| {
            0.2 + 0.01 * (t + l + 2 * w + 3 * d) as f64
        })
        .unwrap();
        let mut plan = PlacementPlan::new();
        plan.push(column(1, 2, &g)).unwrap();
        let obs = observe(&truth, &plan, 0.0, 7).unwrap();
        assert_eq!(obs.len(), 5 * 4);
        for o in &obs.records {
            assert_eq!(o.theta_m, truth.get(o.time, o.node.0, o.node.1, o.node.2));
        }
    }

    #[test]
    fn noise_is_deterministic_and_unbiased() {
        let g = grid(2, 2, 5);
        let tg = TimeGrid::new(0.0, 1.0, 20_000).unwrap();
        let truth = SpatioTemporalField::new(g, tg, Quantity::Moisture, vec![0.3; g.n_nodes() * tg.count]).unwrap();
        let mut plan = PlacementPlan::new();
        plan.push(column(0, 1, &g)).unwrap();
        let a = observe(&truth, &plan, 0.005, 42).unwrap();
        let b = observe(&truth, &plan, 0.005, 42).unwrap();
        assert_eq!(a, b);
        // 5 depths x 20 000 instants = 10^5 draws
        let n = a.len() as f64;
        assert_eq!(a.len(), 100_000);
        let mean = a.records.iter().map(|o| o.theta_m).sum::<f64>() / n;
        assert!((mean - 0.3).abs() <= 3.0 * 0.005 / n.sqrt(), "mean {mean}");
        let c = observe(&truth, &plan, 0.005, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn observe_rejects_out_of_grid_sensor() {
        let g = grid(2, 2, 5);
        let tg = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let truth = SpatioTemporalField::new(g, tg, Quantity::Moisture, vec![0.3; g.n_nodes() * 2]).unwrap();
        let mut plan = PlacementPlan::new();
        plan.push(Column { l: 5, w: 0, depths: [0, 1, 2, 3, 4], provenance: Provenance::RandomBaseline }).unwrap();
        assert!(matches!(observe(&truth, &plan, 0.0, 1), Err(FieldError::Index(_))));
    }

    #[test]
    fn relative_error_cases() {
        let g = grid(2, 2, 2);
        let tg = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let truth = SpatioTemporalField::new(g, tg, Quantity::Moisture, vec![0.2; 16]).unwrap();
        let est = SpatioTemporalField::new(g, tg, Quantity::Moisture, vec![0.21; 16]).unwrap();
        assert_eq!(relative_error(&truth, &truth).unwrap(), 0.0);
        assert!((relative_error(&est, &truth).unwrap() - 0.05).abs() < 1e-12);
        let double = truth.map(Quantity::Moisture, |v| 2.0 * v).unwrap();
        assert!((relative_error(&double, &truth).unwrap() - 1.0).abs() < 1e-15);
        let zero = truth.map(Quantity::Moisture, |_| 0.0).unwrap();
        assert!(matches!(relative_error(&est, &zero), Err(FieldError::ZeroTruth)));
        let head = truth.map(Quantity::PressureHead, |v| v).unwrap();
        assert!(matches!(relative_error(&head, &truth), Err(FieldError::Dimension(_))));
    }

    #[test]
    fn plan_rejects_repeats() {
        let g = grid(4, 4, 5);
        let mut plan = PlacementPlan::new();
        plan.push(column(1, 1, &g)).unwrap();
        assert!(plan.push(column(1, 1, &g)).is_err());
    }

    #[test]
    fn file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let g = grid(3, 4, 5);
        let tg = TimeGrid::new(5.0, 2.5, 3).unwrap();
        let f = SpatioTemporalField::from_fn(g, tg, Quantity::PressureHead, |t, l, w, d| {
            -100.0 + (t * 7 + l * 3 + w + d) as f64 / 3.0
        })
        .unwrap();
        let path = dir.path().join("psi.field");
        f.write(&path).unwrap();
        assert_eq!(SpatioTemporalField::read(&path).unwrap(), f);

        let mut plan = PlacementPlan::new();
        plan.push(column(2, 3, &g)).unwrap();
        plan.push(Column { provenance: Provenance::ActiveLearning, ..column(0, 1, &g) }).unwrap();
        let pp = dir.path().join("placement.csv");
        plan.write_csv(&pp).unwrap();
        assert!(std::fs::read_to_string(&pp).unwrap().starts_with("order,l,w,provenance\n"));
        assert_eq!(PlacementPlan::read_csv(&pp, &g).unwrap(), plan);

        let truth = f.map(Quantity::Moisture, |_| 0.25).unwrap();
        let obs = observe(&truth, &plan, 0.005, 3).unwrap();
        let op = dir.path().join("obs.csv");
        obs.write_csv(&op, &g, &tg).unwrap();
        let back = ObservationSet::read_csv(&op, &g, &tg).unwrap();
        assert_eq!(back.records.len(), obs.records.len());
        assert_eq!(back.seed, 3);
        for (a, b) in back.records.iter().zip(&obs.records) {
            assert_eq!((a.node, a.time, a.theta_m), (b.node, b.time, b.theta_m));
        }
    }

    proptest! {
        #[test]
        fn flatten_round_trip(nl in 2usize..7, nw in 2usize..7, nd in 2usize..7, seed in 0usize..10_000) {
            let g = grid(nl, nw, nd);
            let t = seed % 5;
            let (l, w, d) = (seed % nl, (seed / 7) % nw, (seed / 49) % nd);
            prop_assert_eq!(unflatten(&g, flatten(&g, t, l, w, d)), (t, l, w, d));
        }

        #[test]
        fn relative_error_scaling(c in 0.0f64..5.0, v in 0.01f64..1.0) {
            let g = grid(2, 2, 2);
            let tg = TimeGrid::new(0.0, 1.0, 2).unwrap();
            let b = SpatioTemporalField::new(g, tg, Quantity::Moisture, vec![v; 16]).unwrap();
            let cb = b.map(Quantity::Moisture, |x| c * x).unwrap();
            prop_assert!((relative_error(&cb, &b).unwrap() - (c - 1.0).abs()).abs() < 1e-12);
        }
    }
}
