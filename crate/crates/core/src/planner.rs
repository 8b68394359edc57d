//! Residual-driven sensor placement and the uniform random baseline.
//!
//! A trained network is scored on every grid node and output instant; the
//! squared residuals summed over depth and time give one value per
//! horizontal location. The next column maximises
//! `r′(κ) + λ · d(κ) / max d`, where `r′` is the min-max normalised map and
//! `d(κ)` the xy distance (cm) from κ to the nearest instrumented column.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{
    observe, relative_error, uniform_depth_column, Column, FieldError, Grid3D, PlacementPlan, Provenance,
    SpatioTemporalField, TimeGrid,
};
use crate::hydro::VanGenuchten;
use crate::net::{JetOrder, NetworkParams};
use crate::pinn::{predict_field, residual_of_jet, train_from, PcdlError, Problem, TrainConfig};
use crate::seed;

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("no unobserved location is left to choose from")]
    Exhausted,
    #[error("round {round} ({columns} columns): {source}")]
    Round {
        round: usize,
        columns: usize,
        #[source]
        source: Box<PcdlError>,
    },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Pcdl(#[from] PcdlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ALConfig {
    /// Weight of the space-filling term.
    pub lambda: f64,
    /// Total number of sensors.
    pub budget: usize,
    pub sensors_per_column: usize,
    /// Columns placed at random before the first selection.
    pub initial_random: usize,
    /// Start each round from the previous round's weights instead of a fresh draw.
    pub warm_start: bool,
}

impl Default for ALConfig {
    fn default() -> Self {
        Self { lambda: 1.0, budget: 40, sensors_per_column: 5, initial_random: 1, warm_start: false }
    }
}

impl ALConfig {
    pub fn validate(&self, grid: &Grid3D) -> Result<(), PlannerError> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(PlannerError::Config(format!("lambda must be finite and non-negative, got {}", self.lambda)));
        }
        if self.sensors_per_column != 5 {
            return Err(PlannerError::Config("sensor strings carry exactly 5 sensors".into()));
        }
        if self.budget == 0 || self.budget % self.sensors_per_column != 0 {
            return Err(PlannerError::Config(format!("budget {} is not a positive multiple of 5", self.budget)));
        }
        if self.columns() > grid.n_columns() {
            return Err(PlannerError::Config(format!(
                "budget needs {} columns but the grid has {}",
                self.columns(),
                grid.n_columns()
            )));
        }
        if self.initial_random == 0 || self.initial_random > self.columns() {
            return Err(PlannerError::Config("initial_random must be between 1 and budget / 5".into()));
        }
        Ok(())
    }

    pub fn columns(&self) -> usize {
        self.budget / self.sensors_per_column
    }
}

/// Residual at every node and output instant, flat in field order (t outermost, x innermost).
pub fn residual_field(
    net: &NetworkParams,
    soil: &VanGenuchten,
    grid: &Grid3D,
    times: &TimeGrid,
) -> Result<Vec<f64>, PcdlError> {
    let mut pts = Vec::with_capacity(grid.n_nodes() * times.count);
    for t in 0..times.count {
        let tt = times.instant(t);
        for idx in 0..grid.n_nodes() {
            let (l, w, d) = grid.node_coords(idx);
            let p = grid.position(l, w, d);
            pts.push([p[0], p[1], p[2], tt]);
        }
    }
    let jets = net.forward_batch(&pts, JetOrder::Second);
    jets.iter()
        .zip(&pts)
        .map(|(j, p)| if j.is_finite() { Ok(residual_of_jet(j, soil)) } else { Err(PcdlError::NonFinite(*p)) })
        .collect()
}

/// `r_κ(l, w) = Σ_t Σ_d r²`, indexed `w·N_L + l`.
pub fn cumulative_residual_map(grid: &Grid3D, count: usize, residuals: &[f64]) -> Result<Vec<f64>, PlannerError> {
    if residuals.len() != grid.n_nodes() * count {
        return Err(PlannerError::Config(format!(
            "expected {} residuals, got {}",
            grid.n_nodes() * count,
            residuals.len()
        )));
    }
    let plane = grid.n_columns();
    let mut map = vec![0.0; plane];
    for (i, r) in residuals.iter().enumerate() {
        map[i % plane] += r * r;
    }
    Ok(map)
}

/// `(r − min) / (max − min)`; a constant map becomes all zeros.
pub fn normalize_map(map: &[f64]) -> Vec<f64> {
    let (lo, hi) = map.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        return vec![0.0; map.len()];
    }
    map.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMap {
    pub nl: usize,
    pub nw: usize,
    /// Output instants and depth levels summed over.
    pub instants: usize,
    pub depths: usize,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl ResidualMap {
    pub fn from_residuals(grid: &Grid3D, count: usize, residuals: &[f64]) -> Result<Self, PlannerError> {
        let raw = cumulative_residual_map(grid, count, residuals)?;
        let normalized = normalize_map(&raw);
        Ok(Self { nl: grid.nl, nw: grid.nw, instants: count, depths: grid.nd, raw, normalized })
    }

    pub fn of_network(net: &NetworkParams, problem: &Problem) -> Result<Self, PlannerError> {
        let r = residual_field(net, &problem.soil, &problem.grid, &problem.times)?;
        Self::from_residuals(&problem.grid, problem.times.count, &r)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), FieldError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["l", "w", "r", "r_normalized"])?;
        for wi in 0..self.nw {
            for l in 0..self.nl {
                let i = wi * self.nl + l;
                w.write_record([l.to_string(), wi.to_string(), format!("{:e}", self.raw[i]), self.normalized[i].to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn xy_distance(grid: &Grid3D, a: (usize, usize), b: (usize, usize)) -> f64 {
    let dx = (a.0 as f64 - b.0 as f64) * grid.dx();
    let dy = (a.1 as f64 - b.1 as f64) * grid.dy();
    (dx * dx + dy * dy).sqrt()
}

/// Next location under the combined residual / maximin criterion.
/// Ties go to the lowest `w·N_L + l`.
pub fn select_next(
    grid: &Grid3D,
    normalized: &[f64],
    observed: &[(usize, usize)],
    lambda: f64,
) -> Result<(usize, usize), PlannerError> {
    if normalized.len() != grid.n_columns() {
        return Err(PlannerError::Config("residual map does not match the grid plane".into()));
    }
    if observed.is_empty() {
        return Err(PlannerError::Config("selection needs at least one observed location".into()));
    }
    let plane = grid.n_columns();
    let mut taken = vec![false; plane];
    for &(l, w) in observed {
        taken[w * grid.nl + l] = true;
    }
    let nearest: Vec<f64> = (0..plane)
        .map(|i| {
            let k = (i % grid.nl, i / grid.nl);
            observed.iter().map(|&o| xy_distance(grid, k, o)).fold(f64::INFINITY, f64::min)
        })
        .collect();
    let dmax = (0..plane).filter(|&i| !taken[i]).map(|i| nearest[i]).fold(0.0, f64::max);
    let mut best: Option<(usize, f64)> = None;
    for i in (0..plane).filter(|&i| !taken[i]) {
        let score = normalized[i] + lambda * nearest[i] / dmax;
        if best.map_or(true, |(_, s)| score > s) {
            best = Some((i, score));
        }
    }
    best.map(|(i, _)| (i % grid.nl, i / grid.nl)).ok_or(PlannerError::Exhausted)
}

/// `columns` distinct uniformly drawn locations (partial Fisher–Yates) with uniform depth strings.
pub fn random_baseline(grid: &Grid3D, columns: usize, seed_value: u64) -> Result<PlacementPlan, PlannerError> {
    extend_random(grid, &PlacementPlan::new(), columns, seed_value, Provenance::RandomBaseline)
}

/// Adds uniformly drawn unobserved locations to `start` until it has `columns` columns.
pub fn extend_random(
    grid: &Grid3D,
    start: &PlacementPlan,
    columns: usize,
    seed_value: u64,
    provenance: Provenance,
) -> Result<PlacementPlan, PlannerError> {
    if columns > grid.n_columns() {
        return Err(PlannerError::Config(format!("{columns} columns requested on a {}-location plane", grid.n_columns())));
    }
    let depths = uniform_depth_column(grid)?;
    let mut pool: Vec<usize> = (0..grid.n_columns()).filter(|&i| !start.contains(i % grid.nl, i / grid.nl)).collect();
    let mut plan = start.clone();
    let mut rng = seed::rng(seed_value);
    let mut k = 0;
    while plan.len() < columns {
        let j = rng.gen_range(k..pool.len());
        pool.swap(k, j);
        let i = pool[k];
        k += 1;
        plan.push(Column { l: i % grid.nl, w: i / grid.nl, depths, provenance })?;
    }
    Ok(plan)
}

/// Everything needed to run placement rounds against a known truth.
#[derive(Debug, Clone, Copy)]
pub struct Campaign<'a> {
    pub problem: &'a Problem,
    pub truth: &'a SpatioTemporalField,
    pub train: &'a TrainConfig,
    /// Sensor noise standard deviation.
    pub sigma: f64,
    pub noise_seed: u64,
}

#[derive(Debug, Clone)]
pub struct RoundResult {
    /// 1-based round; round k trains on k columns.
    pub round: usize,
    pub columns: usize,
    pub er: f64,
    pub net: NetworkParams,
    pub best_step: usize,
    /// Map computed from this round's network (absent after the last round).
    pub map: Option<ResidualMap>,
}

#[derive(Debug, Clone)]
pub struct PlacementOutcome {
    pub plan: PlacementPlan,
    pub rounds: Vec<RoundResult>,
}

fn train_round(
    c: &Campaign,
    plan: &PlacementPlan,
    round: usize,
    train_seed: u64,
    start: Option<&NetworkParams>,
) -> Result<(NetworkParams, usize, f64), PlannerError> {
    let wrap = |e: PcdlError| PlannerError::Round { round, columns: plan.len(), source: Box::new(e) };
    let obs = observe(c.truth, plan, c.sigma, c.noise_seed).map_err(|e| wrap(e.into()))?;
    let out = train_from(c.problem, &obs, c.train, train_seed, None, start).map_err(wrap)?;
    let pred = predict_field(&out.net, &c.problem.soil, &c.problem.grid, &c.problem.times).map_err(wrap)?;
    let er = relative_error(&pred, c.truth).map_err(|e| wrap(e.into()))?;
    Ok((out.net, out.best_step, er))
}

/// Seed for round `round` (1-based) trainings under `seed`.
pub fn round_seed(seed_value: u64, round: usize) -> u64 {
    seed::derive(seed_value, &["round", &round.to_string()])
}

/// Sequential active placement. `initial` holds the random starting columns;
/// every later column is chosen from the residual map of the previous round's
/// network. `first_round` can supply an already trained round-1 result.
pub fn al_loop(
    c: &Campaign,
    al: &ALConfig,
    initial: &PlacementPlan,
    seed_value: u64,
    first_round: Option<RoundResult>,
) -> Result<PlacementOutcome, PlannerError> {
    al.validate(&c.problem.grid)?;
    if initial.len() != al.initial_random {
        return Err(PlannerError::Config(format!(
            "expected {} initial columns, got {}",
            al.initial_random,
            initial.len()
        )));
    }
    let grid = c.problem.grid;
    let depths = uniform_depth_column(&grid)?;
    let mut plan = initial.clone();
    let mut rounds: Vec<RoundResult> = Vec::new();
    let first_round_no = plan.len();
    loop {
        let round = plan.len();
        let result = match (&first_round, round == first_round_no) {
            (Some(r), true) if r.columns == round => r.clone(),
            _ => {
                let start = if al.warm_start { rounds.last().map(|r| &r.net) } else { None };
                let (net, best_step, er) = train_round(c, &plan, round, round_seed(seed_value, round), start)?;
                RoundResult { round, columns: round, er, net, best_step, map: None }
            }
        };
        rounds.push(result);
        if plan.len() == al.columns() {
            break;
        }
        let last = rounds.last_mut().expect("round just pushed");
        let map = ResidualMap::of_network(&last.net, c.problem).map_err(|e| match e {
            PlannerError::Pcdl(p) => PlannerError::Round { round, columns: plan.len(), source: Box::new(p) },
            other => other,
        })?;
        let (l, w) = select_next(&grid, &map.normalized, &plan.locations(), al.lambda)?;
        assert!(!plan.contains(l, w), "selection returned an instrumented location");
        last.map = Some(map);
        plan.push(Column { l, w, depths, provenance: Provenance::ActiveLearning })?;
    }
    Ok(PlacementOutcome { plan, rounds })
}

/// Trains one network per prefix of `plan` (1..=len columns) from round `from` on.
pub fn evaluate_rounds(
    c: &Campaign,
    plan: &PlacementPlan,
    seed_value: u64,
    from: usize,
) -> Result<Vec<RoundResult>, PlannerError> {
    (from..=plan.len())
        .map(|k| {
            let (net, best_step, er) = train_round(c, &plan.truncated(k), k, round_seed(seed_value, k), None)?;
            Ok(RoundResult { round: k, columns: k, er, net, best_step, map: None })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(nl: usize, nw: usize) -> Grid3D {
        Grid3D::new(100.0, 100.0, 50.0, nl, nw, 5).unwrap()
    }

    #[test]
    fn normalization_cases() {
        assert_eq!(normalize_map(&[2.0, 4.0, 6.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_map(&[3.0; 4]), vec![0.0; 4]);
    }

    #[test]
    fn cumulative_map_single_entry_and_hand_sum() {
        let g = Grid3D::new(10.0, 10.0, 10.0, 2, 2, 2).unwrap();
        let mut r = vec![0.0; g.n_nodes() * 2];
        assert_eq!(cumulative_residual_map(&g, 2, &r).unwrap(), vec![0.0; 4]);
        r[crate::field::flatten(&g, 1, 1, 0, 1)] = 3.0;
        assert_eq!(cumulative_residual_map(&g, 2, &r).unwrap(), vec![0.0, 9.0, 0.0, 0.0]);
        let vals: Vec<f64> = (0..16).map(|i| i as f64 * 0.5 - 3.0).collect();
        let map = cumulative_residual_map(&g, 2, &vals).unwrap();
        for l in 0..2 {
            for w in 0..2 {
                let mut s = 0.0;
                for t in 0..2 {
                    for d in 0..2 {
                        s += vals[crate::field::flatten(&g, t, l, w, d)].powi(2);
                    }
                }
                assert_eq!(map[w * 2 + l], s);
            }
        }
        assert!(cumulative_residual_map(&g, 3, &vals).is_err());
    }

    #[test]
    fn constant_map_gives_far_corner() {
        let g = grid(6, 6);
        assert_eq!(select_next(&g, &vec![0.0; 36], &[(0, 0)], 1.0).unwrap(), (5, 5));
    }

    #[test]
    fn pure_residual_selection() {
        let g = grid(4, 4);
        let mut m = vec![0.0; 16];
        m[9] = 1.0;
        assert_eq!(select_next(&g, &m, &[(0, 0)], 0.0).unwrap(), (1, 2));
    }

    #[test]
    fn selection_errors() {
        let g = Grid3D::new(10.0, 10.0, 50.0, 2, 2, 5).unwrap();
        let all = [(0, 0), (1, 0), (0, 1), (1, 1)];
        assert!(matches!(select_next(&g, &[0.0; 4], &all, 1.0), Err(PlannerError::Exhausted)));
        assert!(select_next(&g, &[0.0; 4], &[], 1.0).is_err());
    }

    #[test]
    fn random_baseline_is_distinct_and_seeded() {
        let g = grid(5, 4);
        let a = random_baseline(&g, 20, 3).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a, random_baseline(&g, 20, 3).unwrap());
        assert_ne!(a, random_baseline(&g, 20, 4).unwrap());
        assert!(random_baseline(&g, 21, 3).is_err());
        assert_eq!(random_baseline(&g, 1, 3).unwrap().len(), 1);
    }

    #[test]
    fn config_checks() {
        let g = grid(10, 10);
        assert!(ALConfig::default().validate(&g).is_ok());
        assert!(ALConfig { budget: 42, ..ALConfig::default() }.validate(&g).is_err());
        assert!(ALConfig { lambda: -1.0, ..ALConfig::default() }.validate(&g).is_err());
        assert!(ALConfig { budget: 5 * 101, ..ALConfig::default() }.validate(&g).is_err());
        assert_eq!(ALConfig { budget: 5, ..ALConfig::default() }.columns(), 1);
    }
}
