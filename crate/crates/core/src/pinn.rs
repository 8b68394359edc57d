//! Physics-constrained loss and the training / prediction pipeline.
//!
//! The total loss is `w_D·L_D + w_RE·L_RE + w_B·L_B`:
//!
//! * `L_D`: mean squared mismatch between observed moisture and `θ(ψ̂)`;
//! * `L_RE`: mean squared Richards residual at interior collocation points,
//!   the residual multiplied by `residual_scale` (s) before squaring;
//! * `L_B`: mean squared boundary defect, head defects divided by
//!   `head_scale` (cm).
//!
//! With both scales at 1 the terms are in their raw units (1/s² and cm²).
//! The interior collocation set is used both as the residual batch pool and
//! as the evaluation set for checkpoint selection.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{FieldError, Grid3D, ObservationSet, Quantity, SpatioTemporalField, TimeGrid};
use crate::hydro::VanGenuchten;
use crate::net::{
    architecture, init_network, AdamConfig, InputScaling, JetEvaluation, JetOrder, NetError, NetworkParams,
    OptimizerState, OutputScaling, Workspace, CHANNELS, INPUTS,
};
use crate::richards::{BoundarySpec, Face, FaceCondition, Scenario};
use crate::seed;

#[derive(Debug, Error)]
pub enum PcdlError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite jet at {0:?}")]
    NonFinite([f64; INPUTS]),
    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Space-time domain, soil and boundary conditions a network is trained on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Problem {
    pub grid: Grid3D,
    pub times: TimeGrid,
    pub soil: VanGenuchten,
    pub bc: BoundarySpec,
}

impl Problem {
    fn input_scaling(&self) -> Result<InputScaling, NetError> {
        let g = &self.grid;
        InputScaling::new([0.0, 0.0, 0.0, self.times.start], [g.length, g.width, g.depth, self.times.end()])
    }
}

/// Interior and face-tagged boundary points over the domain × time horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct CollocationSet {
    pub interior: Vec<[f64; INPUTS]>,
    pub boundary: Vec<([f64; INPUTS], Face)>,
    /// Scenario the boundary set was drawn for, if any.
    pub scenario: Option<Scenario>,
    pub seed: u64,
}

fn extent(grid: &Grid3D, axis: usize) -> f64 {
    [grid.length, grid.width, grid.depth][axis]
}

fn face_coordinate(grid: &Grid3D, face: Face) -> f64 {
    if face.outward() > 0.0 {
        extent(grid, face.axis())
    } else {
        0.0
    }
}

impl CollocationSet {
    /// `n_interior` points strictly inside the cuboid and `per_face` points on each face.
    pub fn sample(
        grid: &Grid3D,
        times: &TimeGrid,
        scenario: Scenario,
        n_interior: usize,
        per_face: usize,
        seed_value: u64,
    ) -> Self {
        let mut rng = seed::rng(seed_value);
        let (t0, t1) = (times.start, times.end());
        let inside = |rng: &mut rand_chacha::ChaCha8Rng, hi: f64| loop {
            let v = rng.gen_range(0.0..hi);
            if v > 0.0 {
                return v;
            }
        };
        let interior = (0..n_interior)
            .map(|_| {
                let x = inside(&mut rng, grid.length);
                let y = inside(&mut rng, grid.width);
                let z = inside(&mut rng, grid.depth);
                [x, y, z, rng.gen_range(t0..=t1)]
            })
            .collect();
        let mut boundary = Vec::with_capacity(6 * per_face);
        for face in Face::ALL {
            for _ in 0..per_face {
                let mut p = [
                    rng.gen_range(0.0..=grid.length),
                    rng.gen_range(0.0..=grid.width),
                    rng.gen_range(0.0..=grid.depth),
                    rng.gen_range(t0..=t1),
                ];
                p[face.axis()] = face_coordinate(grid, face);
                boundary.push((p, face));
            }
        }
        Self { interior, boundary, scenario: Some(scenario), seed: seed_value }
    }

    fn check_against(&self, grid: &Grid3D, bc: &BoundarySpec) -> Result<(), PcdlError> {
        if let Some(s) = self.scenario {
            if s != bc.scenario {
                return Err(PcdlError::Config(format!(
                    "boundary points were drawn for {s:?} but the boundary spec is {:?}",
                    bc.scenario
                )));
            }
        }
        for (p, face) in &self.boundary {
            let a = face.axis();
            if (p[a] - face_coordinate(grid, *face)).abs() > 1e-9 * extent(grid, a) {
                return Err(PcdlError::Config(format!("point {p:?} is tagged {} but does not lie on it", face.name())));
            }
        }
        Ok(())
    }
}

/// Loss-term weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub data: f64,
    pub residual: f64,
    pub boundary: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { data: 1.0, residual: 1.0, boundary: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub hidden_layers: usize,
    pub width: usize,
    pub adam: AdamConfig,
    /// Interior collocation points `N_c`.
    pub collocation_points: usize,
    pub boundary_points_per_face: usize,
    pub collocation_batch: usize,
    pub boundary_batch: usize,
    pub weights: LossWeights,
    /// Multiplies the residual (1/s) before squaring, s.
    pub residual_scale: f64,
    /// Divides head defects on Dirichlet faces, cm.
    pub head_scale: f64,
    /// Head interval mapped onto the raw output range `[-1, 1]`, cm.
    pub head_range: [f64; 2],
    /// Evaluate full-set losses and keep the best checkpoint every this many steps.
    pub log_interval: usize,
    /// Draw fresh interior points every step instead of batching a fixed set.
    pub resample_collocation: bool,
    /// Fixed-order reductions (always on; kept for config compatibility).
    pub reproducible: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            hidden_layers: 5,
            width: 10,
            adam: AdamConfig::default(),
            collocation_points: 10_000,
            boundary_points_per_face: 2_000,
            collocation_batch: 1_000,
            boundary_batch: 1_000,
            weights: LossWeights::default(),
            residual_scale: 1.0,
            head_scale: 1.0,
            head_range: [-200.0, 0.0],
            log_interval: 100,
            resample_collocation: false,
            reproducible: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PcdlError> {
        let positive = [
            ("steps", self.steps),
            ("hidden_layers", self.hidden_layers),
            ("width", self.width),
            ("collocation_points", self.collocation_points),
            ("collocation_batch", self.collocation_batch),
            ("log_interval", self.log_interval),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(PcdlError::Config(format!("{name} must be positive")));
            }
        }
        let w = self.weights;
        for (name, v) in [("weights.data", w.data), ("weights.residual", w.residual), ("weights.boundary", w.boundary)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(PcdlError::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        if w.boundary > 0.0 && (self.boundary_points_per_face == 0 || self.boundary_batch == 0) {
            return Err(PcdlError::Config("boundary weight is positive but no boundary points are sampled".into()));
        }
        for (name, v) in [("residual_scale", self.residual_scale), ("head_scale", self.head_scale)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PcdlError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.head_range[1] > self.head_range[0]) {
            return Err(PcdlError::Config("head_range must be increasing".into()));
        }
        let a = self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(PcdlError::Config("adam needs lr > 0, betas in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub data: f64,
    pub residual: f64,
    pub boundary: f64,
    /// `residual + boundary`.
    pub physics: f64,
    /// Weighted sum.
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(data: f64, residual: f64, boundary: f64, w: LossWeights) -> Self {
        Self {
            data,
            residual,
            boundary,
            physics: residual + boundary,
            total: w.data * data + w.residual * residual + w.boundary * boundary,
        }
    }
}

/// Richards residual of a jet,
/// `C ψ_t − K′(|∇ψ|² + ψ_z) − K Δψ`, in 1/s.
pub fn residual_of_jet(jet: &JetEvaluation, soil: &VanGenuchten) -> f64 {
    let c = soil.eval(jet.value);
    let g2 = jet.dx * jet.dx + jet.dy * jet.dy + jet.dz * jet.dz;
    c.capacity * jet.dt - c.dk * (g2 + jet.dz) - c.k * (jet.dxx + jet.dyy + jet.dzz)
}

/// Residual and its derivative with respect to each jet channel.
fn residual_adjoint(jet: &JetEvaluation, soil: &VanGenuchten) -> (f64, [f64; CHANNELS]) {
    let c = soil.eval(jet.value);
    let g2 = jet.dx * jet.dx + jet.dy * jet.dy + jet.dz * jet.dz;
    let lap = jet.dxx + jet.dyy + jet.dzz;
    let r = c.capacity * jet.dt - c.dk * (g2 + jet.dz) - c.k * lap;
    let d = [
        c.dcapacity * jet.dt - c.d2k * (g2 + jet.dz) - c.dk * lap,
        -2.0 * c.dk * jet.dx,
        -2.0 * c.dk * jet.dy,
        -c.dk * (2.0 * jet.dz + 1.0),
        c.capacity,
        -c.k,
        -c.k,
        -c.k,
    ];
    (r, d)
}

pub fn re_residual(net: &NetworkParams, soil: &VanGenuchten, point: [f64; INPUTS]) -> Result<f64, PcdlError> {
    let (jet, _) = net.forward_jet(point)?;
    if !jet.is_finite() {
        return Err(PcdlError::NonFinite(point));
    }
    Ok(residual_of_jet(&jet, soil))
}

fn observation_points(problem: &Problem, obs: &ObservationSet) -> Vec<[f64; INPUTS]> {
    obs.records
        .iter()
        .map(|o| {
            let p = problem.grid.position(o.node.0, o.node.1, o.node.2);
            [p[0], p[1], p[2], problem.times.instant(o.time)]
        })
        .collect()
}

pub fn data_loss(net: &NetworkParams, problem: &Problem, obs: &ObservationSet) -> Result<f64, PcdlError> {
    if obs.is_empty() {
        return Err(PcdlError::Domain("data loss needs at least one observation".into()));
    }
    let jets = net.forward_batch(&observation_points(problem, obs), JetOrder::Value);
    let s: f64 = jets.iter().zip(&obs.records).map(|(j, o)| (o.theta_m - problem.soil.theta(j.value)).powi(2)).sum();
    Ok(s / obs.len() as f64)
}

/// Mean squared Richards residual over `points`, residuals multiplied by `scale`.
pub fn re_loss(net: &NetworkParams, soil: &VanGenuchten, points: &[[f64; INPUTS]], scale: f64) -> Result<f64, PcdlError> {
    if points.is_empty() {
        return Err(PcdlError::Domain("residual loss needs at least one interior point".into()));
    }
    let jets = net.forward_batch(points, JetOrder::Second);
    let mut s = 0.0;
    for (j, p) in jets.iter().zip(points) {
        if !j.is_finite() {
            return Err(PcdlError::NonFinite(*p));
        }
        s += (scale * residual_of_jet(j, soil)).powi(2);
    }
    Ok(s / points.len() as f64)
}

/// Defect of the face condition and its jet adjoint (`∂defect/∂channel`).
fn boundary_defect(jet: &JetEvaluation, face: Face, bc: &BoundarySpec, head_scale: f64) -> (f64, [f64; CHANNELS]) {
    let mut d = [0.0; CHANNELS];
    let axis = face.axis();
    let v = match bc.condition(face) {
        FaceCondition::ZeroGradient => {
            d[1 + axis] = 1.0;
            jet.gradient(axis)
        }
        FaceCondition::Gradient(c) => {
            d[1 + axis] = 1.0;
            jet.gradient(axis) - c
        }
        FaceCondition::NoFlux => {
            d[1 + axis] = 1.0;
            jet.gradient(axis) + if axis == 2 { 1.0 } else { 0.0 }
        }
        FaceCondition::Head(c) => {
            d[0] = 1.0 / head_scale;
            (jet.value - c) / head_scale
        }
    };
    (v, d)
}

/// Mean squared boundary defect over every boundary point of `colloc`.
pub fn boundary_loss(
    net: &NetworkParams,
    colloc: &CollocationSet,
    grid: &Grid3D,
    bc: &BoundarySpec,
    head_scale: f64,
) -> Result<f64, PcdlError> {
    colloc.check_against(grid, bc)?;
    if colloc.boundary.is_empty() {
        return Ok(0.0);
    }
    let pts: Vec<_> = colloc.boundary.iter().map(|b| b.0).collect();
    let jets = net.forward_batch(&pts, JetOrder::First);
    let s: f64 = jets.iter().zip(&colloc.boundary).map(|(j, (_, f))| boundary_defect(j, *f, bc, head_scale).0.powi(2)).sum();
    Ok(s / pts.len() as f64)
}

pub fn total_loss(
    net: &NetworkParams,
    problem: &Problem,
    obs: &ObservationSet,
    colloc: &CollocationSet,
    cfg: &TrainConfig,
) -> Result<LossBreakdown, PcdlError> {
    let d = data_loss(net, problem, obs)?;
    let r = re_loss(net, &problem.soil, &colloc.interior, cfg.residual_scale)?;
    let b = boundary_loss(net, colloc, &problem.grid, &problem.bc, cfg.head_scale)?;
    Ok(LossBreakdown::combine(d, r, b, cfg.weights))
}

/// θ̂ = θ(ψ̂) at every node and output instant.
pub fn predict_field(
    net: &NetworkParams,
    soil: &VanGenuchten,
    grid: &Grid3D,
    times: &TimeGrid,
) -> Result<SpatioTemporalField, PcdlError> {
    let mut pts = Vec::with_capacity(grid.n_nodes() * times.count);
    for t in 0..times.count {
        let tt = times.instant(t);
        for idx in 0..grid.n_nodes() {
            let (l, w, d) = grid.node_coords(idx);
            let p = grid.position(l, w, d);
            pts.push([p[0], p[1], p[2], tt]);
        }
    }
    let psi: Vec<f64> = net.forward_batch(&pts, JetOrder::Value).iter().map(|j| j.value).collect();
    Ok(SpatioTemporalField::new(*grid, *times, Quantity::PressureHead, psi)?.map(Quantity::Moisture, |h| soil.theta(h))?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    /// Lowest total recorded so far.
    pub best_total: f64,
    /// Relative error against a reference field, when one was supplied.
    pub er: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest recorded total loss.
    pub net: NetworkParams,
    pub best_step: usize,
    pub history: Vec<LossRecord>,
    pub collocation: CollocationSet,
}

pub fn write_loss_history(history: &[LossRecord], path: &std::path::Path) -> Result<(), FieldError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "L_D", "L_RE", "L_B", "total", "Er"])?;
    for r in history {
        w.write_record([
            r.step.to_string(),
            format!("{:e}", r.loss.data),
            format!("{:e}", r.loss.residual),
            format!("{:e}", r.loss.boundary),
            format!("{:e}", r.loss.total),
            r.er.map(|e| format!("{e:e}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Trains a fresh network on `obs` under the physics of `problem`.
///
/// Seeds: `init` for weights, `collocation` for the point sets, `batch` for
/// mini-batch draws, all children of `seed`.
pub fn train(
    problem: &Problem,
    obs: &ObservationSet,
    cfg: &TrainConfig,
    seed_value: u64,
    reference: Option<&SpatioTemporalField>,
) -> Result<TrainOutcome, PcdlError> {
    train_from(problem, obs, cfg, seed_value, reference, None)
}

/// As [`train`], optionally starting from `start` instead of fresh weights.
pub fn train_from(
    problem: &Problem,
    obs: &ObservationSet,
    cfg: &TrainConfig,
    seed_value: u64,
    reference: Option<&SpatioTemporalField>,
    start: Option<&NetworkParams>,
) -> Result<TrainOutcome, PcdlError> {
    cfg.validate()?;
    if obs.is_empty() {
        return Err(PcdlError::Domain("training needs at least one observation".into()));
    }
    let mut net = match start {
        Some(n) => {
            let mut n = n.clone();
            n.steps = 0;
            n
        }
        None => init_network(
            seed::child(seed_value, "init"),
            &architecture(cfg.hidden_layers, cfg.width),
            problem.input_scaling()?,
            OutputScaling::spanning(cfg.head_range[0], cfg.head_range[1])?,
        )?,
    };
    let colloc = CollocationSet::sample(
        &problem.grid,
        &problem.times,
        problem.bc.scenario,
        cfg.collocation_points,
        if cfg.weights.boundary > 0.0 { cfg.boundary_points_per_face } else { 0 },
        seed::child(seed_value, "collocation"),
    );
    let mut batch_rng = seed::rng(seed::child(seed_value, "batch"));
    let obs_pts = observation_points(problem, obs);
    let soil = problem.soil;
    let bc = problem.bc;
    let w = cfg.weights;
    let mut opt = OptimizerState::new(net.n_params(), cfg.adam);
    let mut ws = Workspace::new(&net);
    let mut grad = vec![0.0; net.n_params()];
    let mut interior_batch = vec![[0.0; INPUTS]; cfg.collocation_batch];
    let nb = cfg.boundary_batch.min(colloc.boundary.len());
    let mut boundary_batch: Vec<([f64; INPUTS], Face)> = Vec::with_capacity(nb);
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize, net.clone());

    let evaluate = |net: &NetworkParams, step: usize| -> Result<(LossBreakdown, Option<f64>), PcdlError> {
        let loss = total_loss(net, problem, obs, &colloc, cfg)?;
        if !loss.total.is_finite() {
            return Err(PcdlError::Diverged { step, what: "non-finite evaluation loss".into() });
        }
        let er = match reference {
            Some(truth) => {
                Some(crate::field::relative_error(&predict_field(net, &soil, &problem.grid, &problem.times)?, truth)?)
            }
            None => None,
        };
        Ok((loss, er))
    };

    for step in 0..=cfg.steps {
        if step % cfg.log_interval == 0 || step == cfg.steps {
            let (loss, er) = evaluate(&net, step)?;
            if loss.total < best.0 {
                best = (loss.total, step, net.clone());
            }
            history.push(LossRecord { step, loss, best_total: best.0, er });
        }
        if step == cfg.steps {
            break;
        }

        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut batch_loss = 0.0;
        if w.data > 0.0 {
            let s = w.data / obs_pts.len() as f64;
            batch_loss += ws.accumulate(&net, &obs_pts, JetOrder::Value, &mut grad, |i, jet| {
                let (th, cap) = soil.theta_and_capacity(jet.value);
                let e = th - obs.records[i].theta_m;
                let mut d = [0.0; CHANNELS];
                d[0] = 2.0 * s * e * cap;
                (s * e * e, d)
            });
        }
        if w.residual > 0.0 {
            for p in interior_batch.iter_mut() {
                *p = if cfg.resample_collocation {
                    let g = &problem.grid;
                    [
                        batch_rng.gen_range(0.0..g.length),
                        batch_rng.gen_range(0.0..g.width),
                        batch_rng.gen_range(0.0..g.depth),
                        batch_rng.gen_range(problem.times.start..=problem.times.end()),
                    ]
                } else {
                    colloc.interior[batch_rng.gen_range(0..colloc.interior.len())]
                };
            }
            let tau = cfg.residual_scale;
            let s = w.residual / interior_batch.len() as f64;
            batch_loss += ws.accumulate(&net, &interior_batch, JetOrder::Second, &mut grad, |_, jet| {
                let (r, mut d) = residual_adjoint(jet, &soil);
                let rs = tau * r;
                let k = 2.0 * s * tau * rs;
                d.iter_mut().for_each(|x| *x *= k);
                (s * rs * rs, d)
            });
        }
        if w.boundary > 0.0 && nb > 0 {
            boundary_batch.clear();
            for _ in 0..nb {
                boundary_batch.push(colloc.boundary[batch_rng.gen_range(0..colloc.boundary.len())]);
            }
            let pts: Vec<_> = boundary_batch.iter().map(|b| b.0).collect();
            let s = w.boundary / nb as f64;
            let hs = cfg.head_scale;
            batch_loss += ws.accumulate(&net, &pts, JetOrder::First, &mut grad, |i, jet| {
                let (v, mut d) = boundary_defect(jet, boundary_batch[i].1, &bc, hs);
                d.iter_mut().for_each(|x| *x *= 2.0 * s * v);
                (s * v * v, d)
            });
        }
        if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(PcdlError::Diverged { step, what: "non-finite mini-batch loss or gradient".into() });
        }
        crate::net::optimizer_step(&mut opt, &mut net, &grad)?;
    }
    let (_, best_step, mut best_net) = best;
    best_net.seed = net.seed;
    Ok(TrainOutcome { net: best_net, best_step, history, collocation: colloc })
}
