use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rootzone_core::experiment::{
    emit_report, load_or_simulate_truth, parse_config, report_from_dir, run_experiment, ExperimentConfig, Strategy,
};
use rootzone_core::field::{observe, relative_error, ObservationSet, PlacementPlan, Quantity, SpatioTemporalField};
use rootzone_core::pinn::{predict_field, train, write_loss_history};
use rootzone_core::seed;

#[derive(Parser)]
#[command(name = "rootzone", version, about = "Root-zone moisture reconstruction and sensor placement")]
struct Cli {
    /// Master seed (overrides the configuration file).
    #[arg(long, global = true, env = "ROOTZONE_SEED")]
    seed: Option<u64>,
    /// Output directory (overrides the configuration file).
    #[arg(long, global = true, env = "ROOTZONE_OUT")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a configuration and print it with every default filled in.
    Check { config: PathBuf },
    /// Simulate (or load from cache) the ground-truth field.
    Simulate { config: PathBuf },
    /// Train one network on an observation set (or on the sensors of a placement plan).
    Train {
        config: PathBuf,
        /// Observation CSV (t,x,y,z,theta_m).
        #[arg(long, conflicts_with = "plan", required_unless_present = "plan")]
        obs: Option<PathBuf>,
        /// Placement CSV; observations are drawn from the ground truth.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Moisture `.field` used for Er logging (defaults to the simulated truth).
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// One repeat of a single placement strategy.
    Place {
        config: PathBuf,
        #[arg(long, default_value = "active")]
        strategy: Strategy,
    },
    /// The full experiment: every strategy for every repeat.
    Run {
        config: PathBuf,
        /// Override the number of repeats.
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Summarise an existing run directory.
    Report {
        #[arg(long = "in")]
        dir: PathBuf,
    },
}

fn load(cli: &Cli, path: &Path) -> Result<ExperimentConfig> {
    let mut cfg = parse_config(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output = o.clone();
    }
    Ok(cfg)
}

fn write_config(cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.output).with_context(|| format!("creating {}", cfg.output.display()))?;
    std::fs::write(cfg.output.join("config.resolved.toml"), cfg.to_toml())?;
    Ok(())
}

fn progress(msg: &str) {
    eprintln!("{msg}");
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Check { config } => {
            let cfg = load(&cli, config)?;
            print!("{}", cfg.to_toml());
        }
        Command::Simulate { config } => {
            let cfg = load(&cli, config)?;
            write_config(&cfg)?;
            let truth = load_or_simulate_truth(&cfg)?;
            let moisture = cfg.output.join("truth_moisture.field");
            truth.moisture.write(&moisture)?;
            println!(
                "head {} ({}), moisture {}",
                truth.path.display(),
                if truth.cached { "cached" } else { "simulated" },
                moisture.display()
            );
        }
        Command::Train { config, obs, plan, truth } => {
            let cfg = load(&cli, config)?;
            write_config(&cfg)?;
            let problem = cfg.problem()?;
            let truth = match truth {
                Some(p) => SpatioTemporalField::read(p)?,
                None => load_or_simulate_truth(&cfg)?.moisture,
            };
            if truth.quantity != Quantity::Moisture {
                bail!("truth field must hold moisture");
            }
            let obs = match (obs, plan) {
                (Some(p), _) => ObservationSet::read_csv(p, &problem.grid, &problem.times)?,
                (None, Some(p)) => {
                    let plan = PlacementPlan::read_csv(p, &problem.grid)?;
                    if plan.is_empty() {
                        bail!("placement plan has no columns");
                    }
                    let obs = observe(&truth, &plan, cfg.noise_sigma, seed::child(cfg.seed, "noise"))?;
                    obs.write_csv(&cfg.output.join("observations.csv"), &problem.grid, &problem.times)?;
                    obs
                }
                (None, None) => bail!("either --obs or --plan is required"),
            };
            let out = train(&problem, &obs, &cfg.train, seed::child(cfg.seed, "train"), Some(&truth))?;
            write_loss_history(&out.history, &cfg.output.join("loss_history.csv"))?;
            out.net.write(&cfg.output.join("network.net"))?;
            let pred = predict_field(&out.net, &problem.soil, &problem.grid, &problem.times)?;
            pred.write(&cfg.output.join("prediction.field"))?;
            println!("best step {}, Er = {:.5e}", out.best_step, relative_error(&pred, &truth)?);
        }
        Command::Place { config, strategy } => {
            let mut cfg = load(&cli, config)?;
            cfg.repeats = 1;
            cfg.strategies = vec![*strategy];
            write_config(&cfg)?;
            let report = run_experiment(&cfg, &progress)?;
            emit_report(&report, &cfg.output)?;
            print!("{}", report_from_dir(&cfg.output)?);
        }
        Command::Run { config, repeats } => {
            let mut cfg = load(&cli, config)?;
            if let Some(r) = repeats {
                cfg.repeats = *r;
            }
            write_config(&cfg)?;
            let report = run_experiment(&cfg, &progress)?;
            emit_report(&report, &cfg.output)?;
            print!("{}", report_from_dir(&cfg.output)?);
        }
        Command::Report { dir } => {
            print!("{}", report_from_dir(dir)?);
        }
    }
    Ok(())
}
