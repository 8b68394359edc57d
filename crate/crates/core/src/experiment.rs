//! Experiment configuration, orchestration and reporting.
//!
//! A run simulates (or loads) the ground truth for the configured scenario,
//! then for every repeat places sensors actively and at random, training one
//! network per round, and aggregates the relative errors per round.
//!
//! Seeds: repeat `r` works under `derive(master, ["repeat", r])`, whose
//! children `initial`, `noise`, `train` and `random` seed the starting
//! column, the sensor noise, the per-round trainings and the baseline draws.
//! Both strategies of a repeat share the starting column, the noise streams
//! and the training seed of each round, so their round-1 results coincide.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::field::{FieldError, Grid3D, PlacementPlan, Provenance, SpatioTemporalField, TimeGrid};
use crate::hydro::{HydroError, VanGenuchten};
use crate::pinn::{PcdlError, Problem, TrainConfig};
use crate::planner::{al_loop, evaluate_rounds, extend_random, ALConfig, Campaign, PlannerError, RoundResult};
use crate::richards::{solve, BoundarySpec, InitialHead, Scenario, SolverConfig, SolverError};
use crate::seed;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path}:{line}: invalid `{key}`: {message}", line = line.map(|l| l.to_string()).unwrap_or_else(|| "?".into()))]
    Invalid { path: String, key: String, line: Option<usize>, message: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("ground truth: {0}")]
    Truth(#[from] SolverError),
    #[error("{strategy} placement, repeat {repeat}: {source}")]
    Placement {
        strategy: Strategy,
        repeat: usize,
        #[source]
        source: PlannerError,
    },
    #[error("report: {0}")]
    Report(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Active,
    Random,
}

impl Strategy {
    pub fn tag(self) -> &'static str {
        match self {
            Strategy::Active => "active",
            Strategy::Random => "random",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "active" => Ok(Strategy::Active),
            "random" => Ok(Strategy::Random),
            _ => Err(format!("unknown strategy `{s}` (expected active or random)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub length: f64,
    pub width: f64,
    pub depth: f64,
    pub nl: usize,
    pub nw: usize,
    pub nd: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { length: 100.0, width: 100.0, depth: 50.0, nl: 20, nw: 20, nd: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    pub start: f64,
    /// Spacing of the output instants, s.
    pub interval: f64,
    /// Number of output instants `T`.
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoilSection {
    pub ks: f64,
    pub theta_s: f64,
    pub theta_r: f64,
    pub alpha: f64,
    pub n: f64,
    pub m: f64,
    /// Accept an `m` that does not satisfy `m = 1 - 1/n`.
    #[serde(default)]
    pub decoupled_shape: bool,
}

impl Default for SoilSection {
    fn default() -> Self {
        let s = VanGenuchten::celia_loam();
        Self { ks: s.ks, theta_s: s.theta_s, theta_r: s.theta_r, alpha: s.alpha, n: s.n, m: s.m, decoupled_shape: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySection {
    /// Surface ∂ψ/∂z under evaporation, cm/cm.
    pub c1: f64,
    /// Bottom head under infiltration, cm.
    pub c2: f64,
    /// Surface head under infiltration, cm.
    pub c3: f64,
}

impl Default for BoundarySection {
    fn default() -> Self {
        Self { c1: -1.8, c2: -100.0, c3: -20.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub dt: f64,
    pub picard_tol: f64,
    pub max_picard: usize,
    pub max_halvings: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        let s = SolverConfig::default();
        Self { dt: s.dt, picard_tol: s.picard_tol, max_picard: s.max_picard, max_halvings: s.max_halvings }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub repeats: usize,
    pub seed: u64,
    pub output: PathBuf,
    /// Directory of cached ground-truth fields; defaults to `<output>/truth`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_cache: Option<PathBuf>,
    /// Standard deviation of the sensor noise.
    pub noise_sigma: f64,
    pub strategies: Vec<Strategy>,
    pub grid: GridSection,
    pub time: TimeSection,
    pub soil: SoilSection,
    pub boundary: BoundarySection,
    pub initial: InitialHead,
    pub solver: SolverSection,
    pub train: TrainConfig,
    pub placement: ALConfig,
}

/// Every key reads from here when the file leaves it out.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    scenario: Scenario,
    #[serde(default = "default_repeats")]
    repeats: usize,
    #[serde(default = "default_seed")]
    seed: u64,
    #[serde(default = "default_output")]
    output: PathBuf,
    #[serde(default)]
    truth_cache: Option<PathBuf>,
    #[serde(default = "default_sigma")]
    noise_sigma: f64,
    #[serde(default = "default_strategies")]
    strategies: Vec<Strategy>,
    #[serde(default)]
    grid: Option<GridSection>,
    time: Option<TimeSection>,
    #[serde(default)]
    soil: Option<SoilSection>,
    #[serde(default)]
    boundary: Option<BoundarySection>,
    #[serde(default)]
    initial: Option<InitialHead>,
    #[serde(default)]
    solver: Option<SolverSection>,
    #[serde(default)]
    train: Option<TrainConfig>,
    #[serde(default)]
    placement: Option<ALConfig>,
}

fn default_repeats() -> usize {
    10
}
fn default_seed() -> u64 {
    20_240_917
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}
fn default_sigma() -> f64 {
    0.005
}
fn default_strategies() -> Vec<Strategy> {
    vec![Strategy::Active, Strategy::Random]
}

/// Horizon defaults: about two days of drying, or half an hour of wetting.
fn default_time(s: Scenario) -> TimeSection {
    match s {
        Scenario::Infiltration => TimeSection { start: 0.0, interval: 90.0, count: 20 },
        _ => TimeSection { start: 0.0, interval: 9000.0, count: 20 },
    }
}

fn default_initial() -> InitialHead {
    InitialHead { base: -100.0, amplitude: 30.0, width: 0.2, wet_center: [0.3, 0.7], dry_center: [0.75, 0.3] }
}

/// Line (1-based) where `key` is set inside `[section]` (or at top level when `section` is empty).
fn locate_key(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = h.trim().to_string();
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    // dotted keys at a parent level, e.g. `train.steps = ...`
    let dotted = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
    text.lines().position(|l| l.split_once('=').is_some_and(|(k, _)| k.trim() == dotted)).map(|i| i + 1)
}

impl ExperimentConfig {
    fn from_raw(raw: RawConfig) -> Self {
        let scenario = raw.scenario;
        ExperimentConfig {
            scenario,
            repeats: raw.repeats,
            seed: raw.seed,
            output: raw.output,
            truth_cache: raw.truth_cache,
            noise_sigma: raw.noise_sigma,
            strategies: raw.strategies,
            grid: raw.grid.unwrap_or_default(),
            time: raw.time.unwrap_or_else(|| default_time(scenario)),
            soil: raw.soil.unwrap_or_default(),
            boundary: raw.boundary.unwrap_or_default(),
            initial: raw.initial.unwrap_or_else(default_initial),
            solver: raw.solver.unwrap_or_default(),
            train: raw.train.unwrap_or_default(),
            placement: raw.placement.unwrap_or_default(),
        }
    }

    /// Parses TOML text; `origin` names the source in error messages.
    pub fn from_str_with_origin(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.into(), message: e.to_string() })?;
        let cfg = Self::from_raw(raw);
        cfg.validate().map_err(|(section, key, message)| ConfigError::Invalid {
            path: origin.into(),
            key: if section.is_empty() { key.to_string() } else { format!("{section}.{key}") },
            line: locate_key(text, section, key),
            message,
        })?;
        Ok(cfg)
    }

    /// Fully resolved configuration with every default written out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    /// Validation failures come back as `(section, key, message)`.
    fn validate(&self) -> Result<(), (&'static str, &'static str, String)> {
        if self.repeats == 0 {
            return Err(("", "repeats", "repeats must be at least 1".into()));
        }
        if !matches!(self.scenario, Scenario::Evaporation | Scenario::Infiltration) {
            return Err(("", "scenario", "experiments run the evaporation or infiltration scenario".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(("", "noise_sigma", "noise level must be non-negative".into()));
        }
        if self.strategies.is_empty() {
            return Err(("", "strategies", "at least one strategy is required".into()));
        }
        let grid = self.grid().map_err(|e| ("grid", "nl", e.to_string()))?;
        self.times().map_err(|e| ("time", "interval", e.to_string()))?;
        self.soil().map_err(|e| match e {
            HydroError::InvalidParameter { name, reason } => {
                let key = match name {
                    "theta" => "theta_r",
                    "all" => "ks",
                    "m" if reason.contains("1 - 1/n") => "m",
                    other => other,
                };
                ("soil", key, reason)
            }
            other => ("soil", "n", other.to_string()),
        })?;
        let bc = self.boundary_spec();
        for (k, v) in [("c1", bc.c1), ("c2", bc.c2), ("c3", bc.c3)] {
            if !v.is_finite() {
                return Err(("boundary", k, "boundary constants must be finite".into()));
            }
        }
        let ic = self.initial;
        if !(ic.base.is_finite() && ic.amplitude.is_finite() && ic.width > 0.0) {
            return Err(("initial", "width", "initial head needs finite base/amplitude and positive width".into()));
        }
        let solver = self.solver_config().map_err(|e| ("solver", "dt", e.to_string()))?;
        let per = self.time.interval / solver.dt;
        if (per - per.round()).abs() > 1e-9 * per || per.round() < 1.0 {
            return Err(("solver", "dt", format!("dt = {} s must divide the output interval {} s", solver.dt, self.time.interval)));
        }
        self.train.validate().map_err(|e| {
            let msg = e.to_string();
            let key = [
                "steps",
                "hidden_layers",
                "width",
                "collocation_points",
                "collocation_batch",
                "boundary_batch",
                "boundary_points_per_face",
                "log_interval",
                "residual_scale",
                "head_scale",
                "head_range",
                "weights",
                "adam",
            ]
            .into_iter()
            .find(|k| msg.contains(k))
            .unwrap_or("steps");
            ("train", key, msg)
        })?;
        self.placement.validate(&grid).map_err(|e| {
            let msg = e.to_string();
            let key = ["lambda", "budget", "initial_random", "sensors"]
                .into_iter()
                .find(|k| msg.contains(k))
                .map(|k| if k == "sensors" { "sensors_per_column" } else { k })
                .unwrap_or("budget");
            ("placement", key, msg)
        })?;
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid3D, FieldError> {
        let g = self.grid;
        Grid3D::new(g.length, g.width, g.depth, g.nl, g.nw, g.nd)
    }

    pub fn times(&self) -> Result<TimeGrid, FieldError> {
        TimeGrid::new(self.time.start, self.time.interval, self.time.count)
    }

    pub fn soil(&self) -> Result<VanGenuchten, HydroError> {
        let s = self.soil;
        if s.decoupled_shape {
            VanGenuchten::decoupled(s.ks, s.theta_s, s.theta_r, s.alpha, s.n, s.m)
        } else {
            VanGenuchten::with_shape(s.ks, s.theta_s, s.theta_r, s.alpha, s.n, s.m)
        }
    }

    pub fn boundary_spec(&self) -> BoundarySpec {
        let b = self.boundary;
        BoundarySpec { scenario: self.scenario, c1: b.c1, c2: b.c2, c3: b.c3 }
    }

    pub fn solver_config(&self) -> Result<SolverConfig, SolverError> {
        let s = self.solver;
        SolverConfig::new(s.dt, s.picard_tol, s.max_picard, s.max_halvings)
    }

    /// Domain, soil and boundary conditions of the configured scenario.
    pub fn problem(&self) -> Result<Problem, ExperimentError> {
        let invalid = |key: &str, message: String| {
            ExperimentError::Config(ConfigError::Invalid { path: "<config>".into(), key: key.into(), line: None, message })
        };
        Ok(Problem {
            grid: self.grid()?,
            times: self.times()?,
            soil: self.soil().map_err(|e| invalid("soil", e.to_string()))?,
            bc: self.boundary_spec(),
        })
    }

    /// Content hash of everything the ground truth depends on.
    pub fn truth_hash(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            scenario: Scenario,
            grid: &'a GridSection,
            time: &'a TimeSection,
            soil: &'a SoilSection,
            boundary: &'a BoundarySection,
            initial: &'a InitialHead,
            solver: &'a SolverSection,
        }
        let key = Key {
            scenario: self.scenario,
            grid: &self.grid,
            time: &self.time,
            soil: &self.soil,
            boundary: &self.boundary,
            initial: &self.initial,
            solver: &self.solver,
        };
        let text = toml::to_string(&key).expect("truth key serialises");
        hex(&Sha256::digest(text.as_bytes()))[..16].to_string()
    }

    /// Hash of the whole resolved configuration.
    pub fn config_hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))[..16].to_string()
    }

    pub fn truth_dir(&self) -> PathBuf {
        self.truth_cache.clone().unwrap_or_else(|| self.output.join("truth"))
    }
}

impl std::str::FromStr for ExperimentConfig {
    type Err = ConfigError;
    fn from_str(text: &str) -> Result<Self, ConfigError> {
        Self::from_str_with_origin(text, "<config>")
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    ExperimentConfig::from_str_with_origin(&text, &path.display().to_string())
}

/// Ground-truth moisture and head, simulated once per content hash.
#[derive(Debug, Clone)]
pub struct Truth {
    pub head: SpatioTemporalField,
    pub moisture: SpatioTemporalField,
    pub path: PathBuf,
    pub cached: bool,
}

pub fn load_or_simulate_truth(cfg: &ExperimentConfig) -> Result<Truth, ExperimentError> {
    let dir = cfg.truth_dir();
    let hash = cfg.truth_hash();
    let head_path = dir.join(format!("{hash}.field"));
    let problem = cfg.problem()?;
    if head_path.exists() {
        let head = SpatioTemporalField::read(&head_path)?;
        if head.grid == problem.grid && head.times == problem.times {
            let soil = problem.soil;
            let moisture = head.map(crate::field::Quantity::Moisture, |h| soil.theta(h))?;
            return Ok(Truth { head, moisture, path: head_path, cached: true });
        }
    }
    let ic = cfg.initial.nodal(&problem.grid);
    let sim = solve(&ic, &problem.bc, &problem.soil, &problem.grid, &problem.times, &cfg.solver_config()?)?;
    std::fs::create_dir_all(&dir)?;
    sim.head.write(&head_path)?;
    Ok(Truth { head: sim.head, moisture: sim.moisture, path: head_path, cached: false })
}

/// One repeat of one strategy.
#[derive(Debug, Clone)]
pub struct RepeatResult {
    pub repeat: usize,
    pub strategy: Strategy,
    pub plan: PlacementPlan,
    /// Er per round (index 0 is round 1); `None` where training failed.
    pub er: Vec<Option<f64>>,
    pub rounds: Vec<RoundResult>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundStats {
    pub round: usize,
    pub columns: usize,
    pub sensors: usize,
    pub mean: f64,
    pub std: f64,
    /// Repeats that contributed.
    pub n: usize,
    /// Repeats excluded because training failed.
    pub excluded: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub scenario: Scenario,
    pub config_hash: String,
    pub truth_hash: String,
    pub master_seed: u64,
    pub repeat_seeds: Vec<u64>,
    pub stats: BTreeMap<Strategy, Vec<RoundStats>>,
    pub repeats: Vec<RepeatResult>,
    pub started: String,
    pub finished: String,
}

/// `(random − active) / random`.
pub fn improvement(active: f64, random: f64) -> f64 {
    if random == 0.0 {
        0.0
    } else {
        (random - active) / random
    }
}

impl ExperimentReport {
    pub fn final_mean(&self, s: Strategy) -> Option<f64> {
        self.stats.get(&s).and_then(|v| v.last()).map(|r| r.mean)
    }

    pub fn round_mean(&self, s: Strategy, round: usize) -> Option<f64> {
        self.stats.get(&s).and_then(|v| v.iter().find(|r| r.round == round)).map(|r| r.mean)
    }

    /// Final-round improvement of active over random placement, when both ran.
    pub fn improvement(&self) -> Option<f64> {
        Some(improvement(self.final_mean(Strategy::Active)?, self.final_mean(Strategy::Random)?))
    }
}

fn aggregate(results: &[RepeatResult], strategy: Strategy, rounds: usize) -> Vec<RoundStats> {
    (1..=rounds)
        .map(|k| {
            let vals: Vec<f64> =
                results.iter().filter(|r| r.strategy == strategy).filter_map(|r| r.er.get(k - 1).copied().flatten()).collect();
            let total = results.iter().filter(|r| r.strategy == strategy).count();
            let n = vals.len();
            let mean = if n > 0 { vals.iter().sum::<f64>() / n as f64 } else { f64::NAN };
            let std = if n > 1 { (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
            RoundStats { round: k, columns: k, sensors: 5 * k, mean, std, n, excluded: total - n }
        })
        .collect()
}

fn timestamp() -> String {
    let now = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).unwrap_or_default();
    format!("{}s since epoch", now.as_secs())
}

fn run_repeat(
    cfg: &ExperimentConfig,
    problem: &Problem,
    truth: &SpatioTemporalField,
    repeat: usize,
    progress: &(dyn Fn(&str) + Sync),
) -> Result<Vec<RepeatResult>, ExperimentError> {
    let rep_seed = seed::derive(cfg.seed, &["repeat", &repeat.to_string()]);
    let campaign = Campaign {
        problem,
        truth,
        train: &cfg.train,
        sigma: cfg.noise_sigma,
        noise_seed: seed::child(rep_seed, "noise"),
    };
    let al = cfg.placement;
    let columns = al.columns();
    let grid = problem.grid;
    let initial = extend_random(&grid, &PlacementPlan::new(), al.initial_random, seed::child(rep_seed, "initial"), Provenance::InitialRandom)
        .map_err(|source| ExperimentError::Placement { strategy: Strategy::Active, repeat, source })?;
    let train_seed = seed::child(rep_seed, "train");
    let mut out = Vec::new();
    let mut shared: Option<Vec<RoundResult>> = None;
    let unpack = |strategy, res: Result<(PlacementPlan, Vec<RoundResult>), PlannerError>, plan_fallback: PlacementPlan| match res {
        Ok((plan, rounds)) => {
            let mut er = vec![None; columns];
            for r in &rounds {
                er[r.round - 1] = Some(r.er);
            }
            RepeatResult { repeat, strategy, plan, er, rounds, failure: None }
        }
        Err(e @ PlannerError::Round { .. }) => {
            RepeatResult { repeat, strategy, plan: plan_fallback, er: vec![None; columns], rounds: vec![], failure: Some(e.to_string()) }
        }
        Err(e) => RepeatResult { repeat, strategy, plan: plan_fallback, er: vec![None; columns], rounds: vec![], failure: Some(format!("fatal: {e}")) },
    };
    for &strategy in &cfg.strategies {
        let res = match strategy {
            Strategy::Active => {
                let first = shared.as_ref().and_then(|v| v.first().cloned());
                al_loop(&campaign, &al, &initial, train_seed, first).map(|o| (o.plan, o.rounds))
            }
            Strategy::Random => extend_random(&grid, &initial, columns, seed::child(rep_seed, "random"), Provenance::RandomBaseline)
                .and_then(|plan| {
                    let from = initial.len();
                    let mut rounds: Vec<RoundResult> = match &shared {
                        Some(v) if !v.is_empty() && v[0].round == from => vec![v[0].clone()],
                        _ => vec![],
                    };
                    rounds.extend(evaluate_rounds(&campaign, &plan, train_seed, from + rounds.len())?);
                    Ok((plan, rounds))
                }),
        };
        if let Ok((_, rounds)) = &res {
            if shared.is_none() {
                shared = Some(rounds.iter().take(1).cloned().map(|mut r| {
                    r.map = None;
                    r
                }).collect());
            }
        }
        let r = unpack(strategy, res, initial.clone());
        if let Some(f) = &r.failure {
            if f.starts_with("fatal") {
                return Err(ExperimentError::Report(format!("{strategy} repeat {repeat}: {f}")));
            }
        }
        progress(&format!(
            "repeat {repeat} {strategy}: {}",
            r.er.iter().map(|e| e.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())).collect::<Vec<_>>().join(" ")
        ));
        out.push(r);
    }
    Ok(out)
}

/// Runs every configured strategy for every repeat and aggregates the errors.
pub fn run_experiment(cfg: &ExperimentConfig, progress: &(dyn Fn(&str) + Sync)) -> Result<ExperimentReport, ExperimentError> {
    let started = timestamp();
    let problem = cfg.problem()?;
    let truth = load_or_simulate_truth(cfg)?;
    progress(&format!("ground truth {} ({})", truth.path.display(), if truth.cached { "cached" } else { "simulated" }));
    let per_repeat: Vec<Vec<RepeatResult>> = (0..cfg.repeats)
        .into_par_iter()
        .map(|r| run_repeat(cfg, &problem, &truth.moisture, r, progress))
        .collect::<Result<_, _>>()?;
    let repeats: Vec<RepeatResult> = per_repeat.into_iter().flatten().collect();
    let rounds = cfg.placement.columns();
    let stats = cfg.strategies.iter().map(|&s| (s, aggregate(&repeats[..], s, rounds))).collect();
    Ok(ExperimentReport {
        scenario: cfg.scenario,
        config_hash: cfg.config_hash(),
        truth_hash: cfg.truth_hash(),
        master_seed: cfg.seed,
        repeat_seeds: (0..cfg.repeats).map(|r| seed::derive(cfg.seed, &["repeat", &r.to_string()])).collect(),
        stats,
        repeats,
        started,
        finished: timestamp(),
    })
}

pub fn write_er_by_round(report: &ExperimentReport, path: &Path) -> Result<(), FieldError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["round", "columns", "sensors", "Er_mean", "Er_std", "strategy"])?;
    for (s, rows) in &report.stats {
        for r in rows {
            w.write_record([
                r.round.to_string(),
                r.columns.to_string(),
                r.sensors.to_string(),
                format!("{:.9e}", r.mean),
                format!("{:.9e}", r.std),
                s.tag().to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `(round, strategy) -> (mean, std)` read back from `er_by_round.csv`.
pub fn read_er_by_round(path: &Path) -> Result<BTreeMap<(Strategy, usize), (f64, f64)>, FieldError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let bad = || FieldError::Format("bad er_by_round row".into());
        let round: usize = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let mean: f64 = rec.get(3).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let std: f64 = rec.get(4).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let strategy: Strategy = rec.get(5).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        out.insert((strategy, round), (mean, std));
    }
    Ok(out)
}

/// Text summary derived from `er_by_round.csv` contents.
pub fn summary_text(er: &BTreeMap<(Strategy, usize), (f64, f64)>, header: &str) -> String {
    let mut s = String::from(header);
    let last = |st: Strategy| er.iter().filter(|((k, _), _)| *k == st).max_by_key(|((_, r), _)| *r).map(|(&(_, r), &v)| (r, v));
    for st in [Strategy::Active, Strategy::Random] {
        if let Some((r, (m, sd))) = last(st) {
            let _ = writeln!(s, "final {st} (round {r}): Er = {m:.4e} ± {sd:.2e}");
        }
    }
    if let (Some((_, (a, _))), Some((_, (r, _)))) = (last(Strategy::Active), last(Strategy::Random)) {
        let _ = writeln!(s, "improvement (random - active) / random: {:.1}%", 100.0 * improvement(a, r));
    }
    s
}

/// Writes `er_by_round.csv`, `summary.txt`, per-repeat placements and residual maps.
pub fn emit_report(report: &ExperimentReport, dir: &Path) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(dir)?;
    let er_path = dir.join("er_by_round.csv");
    write_er_by_round(report, &er_path)?;
    let mut header = String::new();
    let _ = writeln!(header, "scenario: {:?}", report.scenario);
    let _ = writeln!(header, "config hash: {}", report.config_hash);
    let _ = writeln!(header, "truth hash: {}", report.truth_hash);
    let _ = writeln!(header, "master seed: {}", report.master_seed);
    let _ = writeln!(header, "repeat seeds: {:?}", report.repeat_seeds);
    let _ = writeln!(header, "started: {}", report.started);
    let _ = writeln!(header, "finished: {}", report.finished);
    for (s, rows) in &report.stats {
        let excluded: usize = rows.iter().map(|r| r.excluded).sum();
        let _ = writeln!(header, "{s}: {excluded} round trainings excluded after failures");
        for r in rows {
            let _ = writeln!(header, "  round {} ({} sensors): {:.4e} ± {:.2e} (n = {})", r.round, r.sensors, r.mean, r.std, r.n);
        }
    }
    let summary = summary_text(&read_er_by_round(&er_path)?, &header);
    std::fs::write(dir.join("summary.txt"), summary)?;

    let mut per = csv::Writer::from_path(dir.join("er_by_repeat.csv")).map_err(FieldError::from)?;
    per.write_record(["strategy", "repeat", "round", "Er"]).map_err(FieldError::from)?;
    for rep in &report.repeats {
        let sub = dir.join(rep.strategy.tag()).join(format!("repeat_{}", rep.repeat));
        std::fs::create_dir_all(&sub)?;
        rep.plan.write_csv(&sub.join("placement.csv"))?;
        for r in &rep.rounds {
            if let Some(m) = &r.map {
                m.write_csv(&sub.join(format!("residual_map_round{}.csv", r.round)))?;
            }
        }
        if let Some(f) = &rep.failure {
            std::fs::write(sub.join("failure.txt"), f)?;
        }
        for (k, e) in rep.er.iter().enumerate() {
            per.write_record([
                rep.strategy.tag().to_string(),
                rep.repeat.to_string(),
                (k + 1).to_string(),
                e.map(|v| format!("{v:.9e}")).unwrap_or_default(),
            ])
            .map_err(FieldError::from)?;
        }
    }
    per.flush()?;
    Ok(())
}

/// Re-emits `summary.txt` from an existing run directory.
pub fn report_from_dir(dir: &Path) -> Result<String, ExperimentError> {
    let er = read_er_by_round(&dir.join("er_by_round.csv"))?;
    if er.is_empty() {
        return Err(ExperimentError::Report(format!("{} has no rows", dir.join("er_by_round.csv").display())));
    }
    Ok(summary_text(&er, ""))
}

/// `PcdlError` is re-exported for callers matching on training failures.
pub type TrainingError = PcdlError;
