//! Mass-conservative finite-volume solver for the 3D Richards equation.
//!
//! Vertex-centred control volumes (half cells on the boundary) with
//! two-point fluxes `F = K̄·A·Δ(ψ+z)/h`, where `K̄` is the arithmetic mean of
//! the nodal conductivities. Each backward-Euler step of the mixed form
//! `∂θ/∂t = ∇·(K∇(ψ+z)) + S` is solved by modified Picard iteration: the
//! storage term keeps `θ(ψ)` itself and only the correction is linearised
//! through `C = dθ/dψ`, so the discrete water budget closes at convergence.
//! The symmetric Picard system is solved with Jacobi-preconditioned CG.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{FieldError, Grid3D, Quantity, SpatioTemporalField, TimeGrid};
use crate::hydro::VanGenuchten;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite head in input")]
    NonFinite,
    #[error("Picard iteration did not converge in {iterations} iterations (step size {dt} s); max update per iteration: {trace:?}")]
    Convergence { iterations: usize, dt: f64, trace: Vec<f64> },
    #[error("time step failed at output index {index} (t = {time} s): {source}")]
    Step {
        index: usize,
        time: f64,
        #[source]
        source: Box<SolverError>,
    },
    #[error(transparent)]
    Field(#[from] FieldError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Surface head gradient `c1`, free drainage at the bottom, closed sides.
    Evaporation,
    /// Heads `c2` at the bottom and `c3` at the surface, closed sides.
    Infiltration,
    /// Zero water flux through every face (verification).
    Closed,
    /// Head `c2` on every face (verification).
    FixedHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Face {
    /// x = 0
    West,
    /// x = L
    East,
    /// y = 0
    South,
    /// y = W
    North,
    /// z = 0
    Bottom,
    /// z = D
    Top,
}

impl Face {
    pub const ALL: [Face; 6] = [Face::West, Face::East, Face::South, Face::North, Face::Bottom, Face::Top];

    /// Coordinate axis normal to the face (0 = x, 1 = y, 2 = z).
    pub fn axis(self) -> usize {
        match self {
            Face::West | Face::East => 0,
            Face::South | Face::North => 1,
            Face::Bottom | Face::Top => 2,
        }
    }

    /// Sign of the outward normal along [`Face::axis`].
    pub fn outward(self) -> f64 {
        match self {
            Face::West | Face::South | Face::Bottom => -1.0,
            Face::East | Face::North | Face::Top => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Face::West => "west",
            Face::East => "east",
            Face::South => "south",
            Face::North => "north",
            Face::Bottom => "bottom",
            Face::Top => "top",
        }
    }
}

/// What a face prescribes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FaceCondition {
    /// ∂ψ/∂(axis) = 0.
    ZeroGradient,
    /// ∂ψ/∂(axis) = c.
    Gradient(f64),
    /// ∂(ψ + z)/∂(axis) = 0.
    NoFlux,
    /// ψ = c.
    Head(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundarySpec {
    pub scenario: Scenario,
    /// Surface ∂ψ/∂z for evaporation, cm/cm.
    pub c1: f64,
    /// Bottom head for infiltration, cm.
    pub c2: f64,
    /// Surface head for infiltration, cm.
    pub c3: f64,
}

impl BoundarySpec {
    pub fn evaporation(c1: f64) -> Self {
        Self { scenario: Scenario::Evaporation, c1, c2: 0.0, c3: 0.0 }
    }
    pub fn infiltration(c2: f64, c3: f64) -> Self {
        Self { scenario: Scenario::Infiltration, c1: 0.0, c2, c3 }
    }
    pub fn closed() -> Self {
        Self { scenario: Scenario::Closed, c1: 0.0, c2: 0.0, c3: 0.0 }
    }
    pub fn fixed_head(head: f64) -> Self {
        Self { scenario: Scenario::FixedHead, c1: 0.0, c2: head, c3: 0.0 }
    }

    pub fn condition(&self, face: Face) -> FaceCondition {
        match (self.scenario, face) {
            (Scenario::Closed, _) => FaceCondition::NoFlux,
            (Scenario::FixedHead, _) => FaceCondition::Head(self.c2),
            (_, Face::West | Face::East | Face::South | Face::North) => FaceCondition::ZeroGradient,
            (Scenario::Evaporation, Face::Top) => FaceCondition::Gradient(self.c1),
            (Scenario::Evaporation, Face::Bottom) => FaceCondition::ZeroGradient,
            (Scenario::Infiltration, Face::Bottom) => FaceCondition::Head(self.c2),
            (Scenario::Infiltration, Face::Top) => FaceCondition::Head(self.c3),
        }
    }

    /// Prescribed head at a node, if any face through it is Dirichlet.
    /// Top/bottom faces take precedence over side faces.
    fn dirichlet_head(&self, grid: &Grid3D, l: usize, w: usize, d: usize) -> Option<f64> {
        let mut head = None;
        for face in faces_of(grid, l, w, d) {
            if let FaceCondition::Head(h) = self.condition(face) {
                if head.is_none() || face.axis() == 2 {
                    head = Some(h);
                }
            }
        }
        head
    }
}

fn faces_of(grid: &Grid3D, l: usize, w: usize, d: usize) -> impl Iterator<Item = Face> {
    let mut v = Vec::with_capacity(3);
    if l == 0 {
        v.push(Face::West);
    }
    if l == grid.nl - 1 {
        v.push(Face::East);
    }
    if w == 0 {
        v.push(Face::South);
    }
    if w == grid.nw - 1 {
        v.push(Face::North);
    }
    if d == 0 {
        v.push(Face::Bottom);
    }
    if d == grid.nd - 1 {
        v.push(Face::Top);
    }
    v.into_iter()
}

/// Source term `S(x, y, z, t)` in 1/s, used only for manufactured solutions.
pub type SourceFn = Arc<dyn Fn([f64; 3], f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct SolverConfig {
    /// Internal step, s.
    pub dt: f64,
    /// Max |δψ| for Picard convergence, cm.
    pub picard_tol: f64,
    pub max_picard: usize,
    /// Times a failed step may be split in half.
    pub max_halvings: usize,
    source: Option<SourceFn>,
}

impl std::fmt::Debug for SolverConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SolverConfig")
            .field("dt", &self.dt)
            .field("picard_tol", &self.picard_tol)
            .field("max_picard", &self.max_picard)
            .field("max_halvings", &self.max_halvings)
            .field("manufactured_source", &self.source.is_some())
            .finish()
    }
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { dt: 10.0, picard_tol: 1e-6, max_picard: 50, max_halvings: 5, source: None }
    }
}

impl SolverConfig {
    pub fn new(dt: f64, picard_tol: f64, max_picard: usize, max_halvings: usize) -> Result<Self, SolverError> {
        let cfg = Self { dt, picard_tol, max_picard, max_halvings, source: None };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SolverError::Config("dt must be positive".into()));
        }
        if !(self.picard_tol > 0.0) {
            return Err(SolverError::Config("Picard tolerance must be positive".into()));
        }
        if self.max_picard < 1 {
            return Err(SolverError::Config("max Picard iterations must be at least 1".into()));
        }
        Ok(())
    }

    /// Verification only: adds a manufactured source to the balance.
    pub fn with_manufactured_source(mut self, source: SourceFn) -> Self {
        self.source = Some(source);
        self
    }

    pub fn has_source(&self) -> bool {
        self.source.is_some()
    }
}

/// Darcy fluxes on the links of the grid, cm/s, positive along +axis.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxField {
    /// `(nl-1)·nw·nd` links, index `(d·nw + w)·(nl-1) + l`.
    pub qx: Vec<f64>,
    /// `nl·(nw-1)·nd` links, index `(d·(nw-1) + w)·nl + l`.
    pub qy: Vec<f64>,
    /// `nl·nw·(nd-1)` links, index `(d·nw + w)·nl + l`.
    pub qz: Vec<f64>,
}

/// `q = -K̄ ∇(ψ + z)` on every grid link.
pub fn flux(psi: &[f64], p: &VanGenuchten, grid: &Grid3D) -> Result<FluxField, SolverError> {
    if psi.len() != grid.n_nodes() {
        return Err(SolverError::Config("head field does not match grid".into()));
    }
    if psi.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::NonFinite);
    }
    let k: Vec<f64> = psi.iter().map(|&h| p.eval(h).k).collect();
    let (nl, nw, nd) = (grid.nl, grid.nw, grid.nd);
    let (dx, dy, dz) = (grid.dx(), grid.dy(), grid.dz());
    let idx = |l, w, d| grid.node_index(l, w, d);
    let mut qx = Vec::with_capacity((nl - 1) * nw * nd);
    for d in 0..nd {
        for w in 0..nw {
            for l in 0..nl - 1 {
                let (a, b) = (idx(l, w, d), idx(l + 1, w, d));
                qx.push(-0.5 * (k[a] + k[b]) * (psi[b] - psi[a]) / dx);
            }
        }
    }
    let mut qy = Vec::with_capacity(nl * (nw - 1) * nd);
    for d in 0..nd {
        for w in 0..nw - 1 {
            for l in 0..nl {
                let (a, b) = (idx(l, w, d), idx(l, w + 1, d));
                qy.push(-0.5 * (k[a] + k[b]) * (psi[b] - psi[a]) / dy);
            }
        }
    }
    let mut qz = Vec::with_capacity(nl * nw * (nd - 1));
    for d in 0..nd - 1 {
        for w in 0..nw {
            for l in 0..nl {
                let (a, b) = (idx(l, w, d), idx(l, w, d + 1));
                qz.push(-0.5 * (k[a] + k[b]) * ((psi[b] - psi[a]) / dz + 1.0));
            }
        }
    }
    Ok(FluxField { qx, qy, qz })
}

/// Precomputed geometry shared by every step on one grid.
struct Mesh {
    grid: Grid3D,
    volume: Vec<f64>,
    z: Vec<f64>,
    /// Link conductance factors `A/h` per axis (same for every link on an axis
    /// up to the half-cell widths of its end nodes).
    gx: Vec<f64>,
    gy: Vec<f64>,
    gz: Vec<f64>,
    dirichlet: Vec<Option<f64>>,
    /// Neumann boundary segments: (node, face, area).
    neumann: Vec<(usize, FaceCondition, Face, f64)>,
}

fn half_widths(n: usize, h: f64) -> Vec<f64> {
    (0..n).map(|i| if i == 0 || i == n - 1 { 0.5 * h } else { h }).collect()
}

impl Mesh {
    fn new(grid: &Grid3D, bc: &BoundarySpec) -> Self {
        let (nl, nw, nd) = (grid.nl, grid.nw, grid.nd);
        let (dx, dy, dz) = (grid.dx(), grid.dy(), grid.dz());
        let (hx, hy, hz) = (half_widths(nl, dx), half_widths(nw, dy), half_widths(nd, dz));
        let n = grid.n_nodes();
        let mut volume = vec![0.0; n];
        let mut z = vec![0.0; n];
        let mut dirichlet = vec![None; n];
        let mut neumann = Vec::new();
        let mut gx = Vec::with_capacity((nl - 1) * nw * nd);
        let mut gy = Vec::with_capacity(nl * (nw - 1) * nd);
        let mut gz = Vec::with_capacity(nl * nw * (nd - 1));
        for d in 0..nd {
            for w in 0..nw {
                for l in 0..nl {
                    let i = grid.node_index(l, w, d);
                    volume[i] = hx[l] * hy[w] * hz[d];
                    z[i] = d as f64 * dz;
                    dirichlet[i] = bc.dirichlet_head(grid, l, w, d);
                    if dirichlet[i].is_none() {
                        for face in faces_of(grid, l, w, d) {
                            let area = match face.axis() {
                                0 => hy[w] * hz[d],
                                1 => hx[l] * hz[d],
                                _ => hx[l] * hy[w],
                            };
                            let cond = bc.condition(face);
                            if !matches!(cond, FaceCondition::NoFlux) {
                                neumann.push((i, cond, face, area));
                            }
                        }
                    }
                    if l + 1 < nl {
                        gx.push(hy[w] * hz[d] / dx);
                    }
                    if w + 1 < nw {
                        gy.push(hx[l] * hz[d] / dy);
                    }
                    if d + 1 < nd {
                        gz.push(hx[l] * hy[w] / dz);
                    }
                }
            }
        }
        // Pushed in (d, w, l) node order, which is the FluxField link layout.
        Self { grid: *grid, volume, z, gx, gy, gz, dirichlet, neumann }
    }

    /// Calls `f(link, a, b, g)` for every link of every axis.
    #[inline]
    fn for_links(&self, mut f: impl FnMut(usize, usize, usize, usize, f64)) {
        let g = &self.grid;
        let (nl, nw, nd) = (g.nl, g.nw, g.nd);
        let mut k = 0;
        for d in 0..nd {
            for w in 0..nw {
                for l in 0..nl - 1 {
                    f(0, k, g.node_index(l, w, d), g.node_index(l + 1, w, d), self.gx[k]);
                    k += 1;
                }
            }
        }
        k = 0;
        for d in 0..nd {
            for w in 0..nw - 1 {
                for l in 0..nl {
                    f(1, k, g.node_index(l, w, d), g.node_index(l, w + 1, d), self.gy[k]);
                    k += 1;
                }
            }
        }
        k = 0;
        for d in 0..nd - 1 {
            for w in 0..nw {
                for l in 0..nl {
                    f(2, k, g.node_index(l, w, d), g.node_index(l, w, d + 1), self.gz[k]);
                    k += 1;
                }
            }
        }
    }

    fn storage(&self, theta: &[f64]) -> f64 {
        self.volume.iter().zip(theta).map(|(v, t)| v * t).sum()
    }

    /// Water entering through Neumann faces per unit time, per node.
    #[inline]
    fn neumann_influx(&self, cond: FaceCondition, face: Face, area: f64, k: f64) -> f64 {
        let gravity = if face.axis() == 2 { 1.0 } else { 0.0 };
        let grad = match cond {
            FaceCondition::ZeroGradient => 0.0,
            FaceCondition::Gradient(c) => c,
            FaceCondition::NoFlux | FaceCondition::Head(_) => return 0.0,
        };
        // q_axis = -K (grad + gravity); influx = -outward · q_axis · area
        face.outward() * k * (grad + gravity) * area
    }

    /// Net water entering the domain per unit time at state `psi`, and the
    /// source contribution over non-Dirichlet nodes.
    fn boundary_rates(&self, psi: &[f64], k: &[f64], source: &[f64]) -> (f64, f64) {
        let mut influx = 0.0;
        for &(i, cond, face, area) in &self.neumann {
            influx += self.neumann_influx(cond, face, area, k[i]);
        }
        // Dirichlet volumes hold constant storage: what they pass to their
        // neighbours (net of their own source) came in through the boundary.
        self.for_links(|_, _, a, b, g| {
            let f_ab = 0.5 * (k[a] + k[b]) * g * ((psi[a] + self.z[a]) - (psi[b] + self.z[b]));
            if self.dirichlet[a].is_some() {
                influx += f_ab;
            }
            if self.dirichlet[b].is_some() {
                influx -= f_ab;
            }
        });
        let mut src = 0.0;
        for i in 0..psi.len() {
            let s = source[i] * self.volume[i];
            if self.dirichlet[i].is_some() {
                influx -= s;
            } else {
                src += s;
            }
        }
        (influx, src)
    }
}

/// Outcome of one converged backward-Euler step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub psi: Vec<f64>,
    pub iterations: usize,
    /// Water volume that entered through the boundary during the step, cm³.
    pub boundary_volume: f64,
    /// Water volume added by the source during the step, cm³.
    pub source_volume: f64,
}

/// Reusable buffers for the Picard/CG iterations.
struct Workspace {
    theta_old: Vec<f64>,
    theta: Vec<f64>,
    cap: Vec<f64>,
    k: Vec<f64>,
    source: Vec<f64>,
    rhs: Vec<f64>,
    diag: Vec<f64>,
    tx: Vec<f64>,
    ty: Vec<f64>,
    tz: Vec<f64>,
    delta: Vec<f64>,
    r: Vec<f64>,
    zv: Vec<f64>,
    pv: Vec<f64>,
    ap: Vec<f64>,
}

impl Workspace {
    fn new(mesh: &Mesh) -> Self {
        let n = mesh.grid.n_nodes();
        let v = || vec![0.0; n];
        Self {
            theta_old: v(),
            theta: v(),
            cap: v(),
            k: v(),
            source: v(),
            rhs: v(),
            diag: v(),
            tx: vec![0.0; mesh.gx.len()],
            ty: vec![0.0; mesh.gy.len()],
            tz: vec![0.0; mesh.gz.len()],
            delta: v(),
            r: v(),
            zv: v(),
            pv: v(),
            ap: v(),
        }
    }
}

/// The Richards solver bound to one grid, soil and boundary specification.
pub struct RichardsSolver {
    mesh: Mesh,
    soil: VanGenuchten,
    bc: BoundarySpec,
    cfg: SolverConfig,
    work: Workspace,
}

impl RichardsSolver {
    pub fn new(grid: &Grid3D, soil: VanGenuchten, bc: BoundarySpec, cfg: SolverConfig) -> Result<Self, SolverError> {
        cfg.validate()?;
        soil.check_ranges().map_err(|e| SolverError::Config(e.to_string()))?;
        let mesh = Mesh::new(grid, &bc);
        let work = Workspace::new(&mesh);
        Ok(Self { mesh, soil, bc, cfg, work })
    }

    pub fn boundary(&self) -> &BoundarySpec {
        &self.bc
    }

    /// Copy of `psi` with Dirichlet nodes set to their prescribed heads.
    pub fn impose_dirichlet(&self, psi: &[f64]) -> Vec<f64> {
        psi.iter().zip(&self.mesh.dirichlet).map(|(&h, dir)| dir.unwrap_or(h)).collect()
    }

    /// Total water volume Σθ·ΔV, cm³.
    pub fn storage(&self, psi: &[f64]) -> f64 {
        let theta: Vec<f64> = psi.iter().map(|&h| self.soil.theta(h)).collect();
        self.mesh.storage(&theta)
    }

    fn fill_source(&mut self, t: f64) {
        match &self.cfg.source {
            Some(s) => {
                for i in 0..self.mesh.volume.len() {
                    let (l, w, d) = self.mesh.grid.node_coords(i);
                    self.work.source[i] = s(self.mesh.grid.position(l, w, d), t);
                }
            }
            None => self.work.source.iter_mut().for_each(|v| *v = 0.0),
        }
    }

    /// One backward-Euler step of length `dt` ending at time `t_end`.
    pub fn advance(&mut self, psi_now: &[f64], dt: f64, t_end: f64) -> Result<StepOutcome, SolverError> {
        let n = self.mesh.volume.len();
        if psi_now.len() != n {
            return Err(SolverError::Config("head field does not match grid".into()));
        }
        if psi_now.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::NonFinite);
        }
        self.fill_source(t_end);
        let mut psi = self.impose_dirichlet(psi_now);
        for i in 0..n {
            self.work.theta_old[i] = self.soil.theta(psi_now[i]);
        }
        let mut trace = Vec::new();
        for iter in 1..=self.cfg.max_picard {
            self.assemble(&psi, dt);
            self.cg_solve()?;
            let max_update = self.work.delta.iter().fold(0.0f64, |m, d| m.max(d.abs()));
            if !max_update.is_finite() {
                return Err(SolverError::Convergence { iterations: iter, dt, trace });
            }
            for (h, d) in psi.iter_mut().zip(&self.work.delta) {
                *h += d;
            }
            trace.push(max_update);
            if max_update < self.cfg.picard_tol {
                for i in 0..n {
                    let (k, _) = self.soil.conductivity_and_derivative(psi[i]);
                    self.work.k[i] = k;
                }
                let (rate, src) = self.mesh.boundary_rates(&psi, &self.work.k, &self.work.source);
                return Ok(StepOutcome {
                    psi,
                    iterations: iter,
                    boundary_volume: rate * dt,
                    source_volume: src * dt,
                });
            }
        }
        Err(SolverError::Convergence { iterations: self.cfg.max_picard, dt, trace })
    }

    /// `advance`, splitting the step in halves on Picard failure.
    fn advance_retry(&mut self, psi: &[f64], dt: f64, t_end: f64, depth: usize) -> Result<StepOutcome, SolverError> {
        match self.advance(psi, dt, t_end) {
            Ok(s) => Ok(s),
            Err(SolverError::Convergence { .. }) if depth < self.cfg.max_halvings => {
                let half = 0.5 * dt;
                let a = self.advance_retry(psi, half, t_end - half, depth + 1)?;
                let b = self.advance_retry(&a.psi, half, t_end, depth + 1)?;
                Ok(StepOutcome {
                    psi: b.psi,
                    iterations: a.iterations + b.iterations,
                    boundary_volume: a.boundary_volume + b.boundary_volume,
                    source_volume: a.source_volume + b.source_volume,
                })
            }
            Err(e) => Err(e),
        }
    }

    /// Builds `A δ = -R(ψ^m)` for the Picard correction.
    fn assemble(&mut self, psi: &[f64], dt: f64) {
        let mesh = &self.mesh;
        let w = &mut self.work;
        let n = psi.len();
        for i in 0..n {
            let c = self.soil.eval(psi[i]);
            w.theta[i] = c.theta;
            w.cap[i] = c.capacity;
            w.k[i] = c.k;
        }
        for i in 0..n {
            if mesh.dirichlet[i].is_some() {
                w.diag[i] = 1.0;
                w.rhs[i] = 0.0;
            } else {
                w.diag[i] = mesh.volume[i] * w.cap[i] / dt;
                w.rhs[i] = -mesh.volume[i] * (w.theta[i] - w.theta_old[i]) / dt + mesh.volume[i] * w.source[i];
            }
        }
        for &(i, cond, face, area) in &mesh.neumann {
            w.rhs[i] += mesh.neumann_influx(cond, face, area, w.k[i]);
        }
        let (k, z) = (&w.k, &mesh.z);
        let (diag, rhs) = (&mut w.diag, &mut w.rhs);
        let (tx, ty, tz) = (&mut w.tx, &mut w.ty, &mut w.tz);
        mesh.for_links(|axis, link, a, b, g| {
            let t = 0.5 * (k[a] + k[b]) * g;
            let f_ab = t * ((psi[a] + z[a]) - (psi[b] + z[b]));
            let (da, db) = (mesh.dirichlet[a].is_some(), mesh.dirichlet[b].is_some());
            if !da {
                diag[a] += t;
                rhs[a] -= f_ab;
            }
            if !db {
                diag[b] += t;
                rhs[b] += f_ab;
            }
            // Off-diagonal coupling only between unknowns.
            let off = if da || db { 0.0 } else { t };
            match axis {
                0 => tx[link] = off,
                1 => ty[link] = off,
                _ => tz[link] = off,
            }
        });
    }

    /// y = A x using the link coefficients.
    fn apply(mesh: &Mesh, diag: &[f64], tx: &[f64], ty: &[f64], tz: &[f64], x: &[f64], y: &mut [f64]) {
        for i in 0..x.len() {
            y[i] = diag[i] * x[i];
        }
        mesh.for_links(|axis, link, a, b, _| {
            let t = match axis {
                0 => tx[link],
                1 => ty[link],
                _ => tz[link],
            };
            if t != 0.0 {
                y[a] -= t * x[b];
                y[b] -= t * x[a];
            }
        });
    }

    fn cg_solve(&mut self) -> Result<(), SolverError> {
        let mesh = &self.mesh;
        let w = &mut self.work;
        let n = w.rhs.len();
        w.delta.iter_mut().for_each(|v| *v = 0.0);
        w.r.copy_from_slice(&w.rhs);
        let bnorm = w.rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        if bnorm == 0.0 {
            return Ok(());
        }
        for i in 0..n {
            w.zv[i] = w.r[i] / w.diag[i];
        }
        w.pv.copy_from_slice(&w.zv);
        let mut rz: f64 = w.r.iter().zip(&w.zv).map(|(a, b)| a * b).sum();
        let max_iter = 10 * n + 100;
        for _ in 0..max_iter {
            Self::apply(mesh, &w.diag, &w.tx, &w.ty, &w.tz, &w.pv, &mut w.ap);
            let pap: f64 = w.pv.iter().zip(&w.ap).map(|(a, b)| a * b).sum();
            if !(pap > 0.0) {
                return Err(SolverError::Convergence { iterations: 0, dt: f64::NAN, trace: vec![pap] });
            }
            let alpha = rz / pap;
            for i in 0..n {
                w.delta[i] += alpha * w.pv[i];
                w.r[i] -= alpha * w.ap[i];
            }
            let rnorm = w.r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if rnorm <= 1e-13 * bnorm {
                return Ok(());
            }
            for i in 0..n {
                w.zv[i] = w.r[i] / w.diag[i];
            }
            let rz_new: f64 = w.r.iter().zip(&w.zv).map(|(a, b)| a * b).sum();
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                w.pv[i] = w.zv[i] + beta * w.pv[i];
            }
        }
        Ok(())
    }
}

/// Ledger entry for one internal time step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// End time of the step, s.
    pub t: f64,
    /// Water volume after the step, cm³.
    pub storage: f64,
    /// Volume entering through the boundary during the step, cm³.
    pub boundary_volume: f64,
    /// Volume added by the source during the step, cm³.
    pub source_volume: f64,
    pub picard_iterations: usize,
}

/// Output of [`solve`].
#[derive(Debug, Clone)]
pub struct Simulation {
    pub head: SpatioTemporalField,
    pub moisture: SpatioTemporalField,
    pub initial_storage: f64,
    pub steps: Vec<StepRecord>,
}

/// Integrates from `ic` and stores ψ and θ at every output instant.
pub fn solve(
    ic: &[f64],
    bc: &BoundarySpec,
    soil: &VanGenuchten,
    grid: &Grid3D,
    times: &TimeGrid,
    cfg: &SolverConfig,
) -> Result<Simulation, SolverError> {
    let per_interval = (times.interval / cfg.dt).round();
    if per_interval < 1.0 || (per_interval * cfg.dt - times.interval).abs() > 1e-9 * times.interval {
        return Err(SolverError::Config(format!(
            "dt = {} s must divide the output interval {} s",
            cfg.dt, times.interval
        )));
    }
    let per_interval = per_interval as usize;
    let mut solver = RichardsSolver::new(grid, *soil, *bc, cfg.clone())?;
    if ic.len() != grid.n_nodes() {
        return Err(SolverError::Config("initial condition does not match grid".into()));
    }
    if ic.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::NonFinite);
    }
    let mut psi = solver.impose_dirichlet(ic);
    let mut head = Vec::with_capacity(grid.n_nodes() * times.count);
    head.extend_from_slice(&psi);
    let initial_storage = solver.storage(&psi);
    let mut steps = Vec::with_capacity(per_interval * (times.count - 1));
    for j in 1..times.count {
        for s in 0..per_interval {
            let t_end = times.instant(j - 1) + (s + 1) as f64 * cfg.dt;
            let out = solver
                .advance_retry(&psi, cfg.dt, t_end, 0)
                .map_err(|e| SolverError::Step { index: j, time: t_end, source: Box::new(e) })?;
            psi = out.psi;
            steps.push(StepRecord {
                step: steps.len() + 1,
                t: t_end,
                storage: solver.storage(&psi),
                boundary_volume: out.boundary_volume,
                source_volume: out.source_volume,
                picard_iterations: out.iterations,
            });
        }
        head.extend_from_slice(&psi);
    }
    let head = SpatioTemporalField::new(*grid, *times, Quantity::PressureHead, head)?;
    let moisture = head.map(Quantity::Moisture, |h| soil.theta(h))?;
    Ok(Simulation { head, moisture, initial_storage, steps })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalanceRow {
    pub step: usize,
    pub t: f64,
    pub storage: f64,
    /// Boundary volume entering during the step (plus any source), cm³.
    pub boundary_flux: f64,
    /// |ΔS − inflow| for the step, cm³.
    pub imbalance: f64,
}

#[derive(Debug, Clone)]
pub struct MassBalance {
    pub rows: Vec<BalanceRow>,
    pub initial_storage: f64,
    pub storage_change: f64,
    pub boundary_total: f64,
    /// |total ΔS − total inflow|, cm³.
    pub cumulative_imbalance: f64,
    /// Largest gap between the ledger storage and Σθ(ψ)ΔV recomputed from the
    /// stored head snapshots, cm³.
    pub snapshot_mismatch: f64,
}

impl MassBalance {
    pub fn relative_imbalance(&self) -> f64 {
        self.cumulative_imbalance / self.initial_storage.abs()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), FieldError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "t", "storage", "boundary_flux", "imbalance"])?;
        for r in &self.rows {
            w.write_record([
                r.step.to_string(),
                r.t.to_string(),
                r.storage.to_string(),
                r.boundary_flux.to_string(),
                r.imbalance.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Water budget of a simulation, per step and cumulatively.
pub fn mass_balance(sim: &Simulation, bc: &BoundarySpec, soil: &VanGenuchten) -> Result<MassBalance, SolverError> {
    let grid = sim.head.grid;
    let mesh = Mesh::new(&grid, bc);
    let mut rows = Vec::with_capacity(sim.steps.len());
    let mut prev = sim.initial_storage;
    let mut inflow_total = 0.0;
    for s in &sim.steps {
        let inflow = s.boundary_volume + s.source_volume;
        rows.push(BalanceRow {
            step: s.step,
            t: s.t,
            storage: s.storage,
            boundary_flux: inflow,
            imbalance: ((s.storage - prev) - inflow).abs(),
        });
        inflow_total += inflow;
        prev = s.storage;
    }
    let per_interval = if sim.head.times.count > 1 { sim.steps.len() / (sim.head.times.count - 1) } else { 0 };
    let mut snapshot_mismatch = 0.0f64;
    for j in 0..sim.head.times.count {
        let theta: Vec<f64> = sim.head.snapshot(j).iter().map(|&h| soil.theta(h)).collect();
        let stored = mesh.storage(&theta);
        let ledger = if j == 0 { sim.initial_storage } else { sim.steps[j * per_interval - 1].storage };
        snapshot_mismatch = snapshot_mismatch.max((stored - ledger).abs());
    }
    let storage_change = prev - sim.initial_storage;
    Ok(MassBalance {
        rows,
        initial_storage: sim.initial_storage,
        storage_change,
        boundary_total: inflow_total,
        cumulative_imbalance: (storage_change - inflow_total).abs(),
        snapshot_mismatch,
    })
}

/// Smooth horizontally varying initial head:
/// `base + amplitude·(g(x,y; wet) − g(x,y; dry))`, `g` a Gaussian bump of
/// standard deviation `width·min(L, W)` centred at fractional positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialHead {
    pub base: f64,
    pub amplitude: f64,
    pub width: f64,
    pub wet_center: [f64; 2],
    pub dry_center: [f64; 2],
}

impl InitialHead {
    pub fn uniform(base: f64) -> Self {
        Self { base, amplitude: 0.0, width: 0.2, wet_center: [0.3, 0.7], dry_center: [0.75, 0.3] }
    }

    pub fn at(&self, grid: &Grid3D, x: f64, y: f64) -> f64 {
        let s = self.width * grid.length.min(grid.width);
        let bump = |c: [f64; 2]| {
            let (dx, dy) = (x - c[0] * grid.length, y - c[1] * grid.width);
            (-(dx * dx + dy * dy) / (2.0 * s * s)).exp()
        };
        self.base + self.amplitude * (bump(self.wet_center) - bump(self.dry_center))
    }

    pub fn nodal(&self, grid: &Grid3D) -> Vec<f64> {
        (0..grid.n_nodes())
            .map(|i| {
                let (l, w, d) = grid.node_coords(i);
                let p = grid.position(l, w, d);
                self.at(grid, p[0], p[1])
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn soil() -> VanGenuchten {
        VanGenuchten::celia_loam()
    }

    fn hydrostatic(grid: &Grid3D, c: f64) -> Vec<f64> {
        (0..grid.n_nodes()).map(|i| c - grid.node_coords(i).2 as f64 * grid.dz()).collect()
    }

    #[test]
    fn hydrostatic_flux_vanishes() {
        let g = Grid3D::new(100.0, 100.0, 50.0, 4, 3, 5).unwrap();
        let q = flux(&hydrostatic(&g, -80.0), &soil(), &g).unwrap();
        for v in q.qx.iter().chain(&q.qy).chain(&q.qz) {
            assert!(v.abs() < 1e-18, "{v}");
        }
    }

    #[test]
    fn uniform_head_has_no_horizontal_flux_and_drains_by_gravity() {
        let g = Grid3D::new(100.0, 100.0, 50.0, 3, 3, 4).unwrap();
        let q = flux(&vec![-100.0; g.n_nodes()], &soil(), &g).unwrap();
        assert!(q.qx.iter().chain(&q.qy).all(|v| *v == 0.0));
        let k = soil().hydraulic_conductivity(-100.0).unwrap();
        assert!(q.qz.iter().all(|v| (v + k).abs() < 1e-20));
    }

    #[test]
    fn two_node_column_gravity_drainage() {
        let g = Grid3D::new(1.0, 1.0, 12.5, 2, 2, 2).unwrap();
        let q = flux(&vec![-100.0; g.n_nodes()], &soil(), &g).unwrap();
        let k = soil().eval(-100.0).k;
        assert_eq!(q.qz.len(), 4);
        assert!(q.qz.iter().all(|v| *v == -k));
    }

    #[test]
    fn flux_rejects_non_finite() {
        let g = Grid3D::new(1.0, 1.0, 1.0, 2, 2, 2).unwrap();
        let mut psi = vec![-10.0; 8];
        psi[3] = f64::NAN;
        assert!(matches!(flux(&psi, &soil(), &g), Err(SolverError::NonFinite)));
    }

    #[test]
    fn hydrostatic_is_a_fixed_point() {
        let g = Grid3D::new(100.0, 100.0, 50.0, 5, 5, 5).unwrap();
        let mut s = RichardsSolver::new(&g, soil(), BoundarySpec::closed(), SolverConfig::default()).unwrap();
        let psi0 = hydrostatic(&g, -60.0);
        let out = s.advance(&psi0, 10.0, 10.0).unwrap();
        let dmax = out.psi.iter().zip(&psi0).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(dmax < 1e-8, "{dmax}");
    }

    #[test]
    fn closed_domain_conserves_water() {
        let g = Grid3D::new(100.0, 100.0, 50.0, 6, 5, 5).unwrap();
        let ic = InitialHead { base: -100.0, amplitude: 40.0, ..InitialHead::uniform(-100.0) }.nodal(&g);
        let times = TimeGrid::new(0.0, 100.0, 11).unwrap();
        let sim = solve(&ic, &BoundarySpec::closed(), &soil(), &g, &times, &SolverConfig::default()).unwrap();
        assert_eq!(sim.steps.len(), 100);
        let last = sim.steps.last().unwrap().storage;
        assert!(((last - sim.initial_storage) / sim.initial_storage).abs() <= 1e-6);
        let mb = mass_balance(&sim, &BoundarySpec::closed(), &soil()).unwrap();
        assert!(mb.relative_imbalance() <= 1e-6);
        assert!(mb.snapshot_mismatch <= 1e-9 * mb.initial_storage);
    }

    #[test]
    fn infiltration_wets_the_surface_without_overshoot() {
        let g = Grid3D::new(100.0, 100.0, 50.0, 4, 4, 6).unwrap();
        let bc = BoundarySpec::infiltration(-100.0, -20.0);
        let times = TimeGrid::new(0.0, 60.0, 6).unwrap();
        let sim = solve(&vec![-100.0; g.n_nodes()], &bc, &soil(), &g, &times, &SolverConfig::default()).unwrap();
        let p = soil();
        for l in 0..g.nl {
            for w in 0..g.nw {
                let d = g.nd - 2;
                assert!(sim.moisture.get(1, l, w, d) >= sim.moisture.get(0, l, w, d));
            }
        }
        assert!(sim.moisture.values().iter().all(|&t| t <= p.theta_s + 1e-9));
        let mb = mass_balance(&sim, &bc, &p).unwrap();
        assert!(mb.boundary_total > 0.0);
        assert!(mb.relative_imbalance() <= 1e-4, "{}", mb.relative_imbalance());
    }

    #[test]
    fn evaporation_dries_the_domain() {
        let g = Grid3D::new(100.0, 100.0, 50.0, 4, 4, 5).unwrap();
        let bc = BoundarySpec::evaporation(-1.8);
        let times = TimeGrid::new(0.0, 600.0, 5).unwrap();
        let sim = solve(&vec![-100.0; g.n_nodes()], &bc, &soil(), &g, &times, &SolverConfig::default()).unwrap();
        let mb = mass_balance(&sim, &bc, &soil()).unwrap();
        assert!(mb.rows.iter().all(|r| r.boundary_flux < 0.0));
        let storages: Vec<f64> = (0..times.count).map(|j| {
            let th: Vec<f64> = sim.moisture.snapshot(j).to_vec();
            Mesh::new(&g, &bc).storage(&th)
        }).collect();
        assert!(storages.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn dt_must_divide_interval() {
        let g = Grid3D::new(1.0, 1.0, 1.0, 2, 2, 2).unwrap();
        let times = TimeGrid::new(0.0, 15.0, 2).unwrap();
        let err = solve(&vec![-10.0; 8], &BoundarySpec::closed(), &soil(), &g, &times, &SolverConfig::default());
        assert!(matches!(err, Err(SolverError::Config(_))));
    }

    #[test]
    fn non_convergence_reports_trace() {
        let g = Grid3D::new(100.0, 100.0, 50.0, 3, 3, 3).unwrap();
        let cfg = SolverConfig { max_picard: 1, picard_tol: 1e-30, max_halvings: 0, ..SolverConfig::default() };
        let mut s = RichardsSolver::new(&g, soil(), BoundarySpec::infiltration(-100.0, -20.0), cfg).unwrap();
        match s.advance(&vec![-100.0; g.n_nodes()], 10.0, 10.0) {
            Err(SolverError::Convergence { iterations, trace, .. }) => {
                assert_eq!(iterations, 1);
                assert_eq!(trace.len(), 1);
            }
            other => panic!("expected convergence error, got {other:?}"),
        }
    }

    #[test]
    fn dirichlet_nodes_stay_fixed() {
        let g = Grid3D::new(100.0, 100.0, 50.0, 3, 3, 5).unwrap();
        let bc = BoundarySpec::infiltration(-90.0, -30.0);
        let times = TimeGrid::new(0.0, 50.0, 3).unwrap();
        let sim = solve(&vec![-100.0; g.n_nodes()], &bc, &soil(), &g, &times, &SolverConfig::default()).unwrap();
        for t in 0..3 {
            for l in 0..3 {
                for w in 0..3 {
                    assert_eq!(sim.head.get(t, l, w, 0), -90.0);
                    assert_eq!(sim.head.get(t, l, w, 4), -30.0);
                }
            }
        }
    }
}
