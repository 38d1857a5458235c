use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use isnet_core::model::presets::Topology;
use isnet_core::EstimationMode;
use isnet_cli::commands::{self, EstimateInput};
use isnet_cli::config::{Overrides, RunConfig};
use isnet_cli::experiments::{self, Experiment, ExperimentOptions};
use isnet_cli::{CliError, CliResult};

/// Simulation and moment-based inference for networks of infinite-server
/// queues observed at Poisson epochs.
#[derive(Debug, Parser)]
#[command(name = "isnet", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory (default: `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Sampling epochs per run.
    #[arg(long, global = true)]
    m: Option<usize>,
    /// Replications.
    #[arg(long = "R", global = true)]
    replications: Option<usize>,
    /// Sampling rate.
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// known, parametric, modelfree or withp.
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<EstimationMode>,
    /// Start the simulation empty and discard this much time.
    #[arg(long, global = true)]
    burnin: Option<f64>,
    /// Experiments: use the original replication counts and grids.
    #[arg(long, global = true)]
    full: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one observation log.
    Simulate,
    /// Write the analytic moments of the configured network.
    Moments,
    /// Estimate parameters from a log or from moment files.
    Estimate {
        #[arg(long, conflicts_with = "moments", required_unless_present = "moments")]
        log: Option<PathBuf>,
        /// Directory holding alpha0.csv, alpha1.csv and alpha2.csv.
        #[arg(long)]
        moments: Option<PathBuf>,
    },
    /// Run one of the Monte Carlo studies.
    Experiment {
        /// experiment-1, experiment-2, experiment-3 or experiment-4.
        name: String,
        /// Experiment 1 only: line, circle, symmetric_circle or cliques.
        #[arg(long, value_parser = parse_topology)]
        topology: Option<Topology>,
    },
}

fn parse_mode(s: &str) -> Result<EstimationMode, String> {
    s.parse().map_err(|e: isnet_core::Error| e.to_string())
}

fn parse_topology(s: &str) -> Result<Topology, String> {
    s.parse().map_err(|e: isnet_core::Error| e.to_string())
}

impl Global {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            m: self.m,
            replications: self.replications,
            beta: self.beta,
            mode: self.mode,
            burnin: self.burnin,
            out: self.out.clone(),
        }
    }

    fn run_config(&self) -> CliResult<RunConfig> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| CliError::config("--config is required for this command"))?;
        let mut cfg = RunConfig::load(path)?;
        cfg.apply(&self.overrides())?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let g = &cli.global;
    if let Some(jobs) = g.jobs {
        if jobs == 0 {
            return Err(CliError::config("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(CliError::config)?;
    }
    match &cli.command {
        Command::Simulate => {
            let path = commands::cmd_simulate(&g.run_config()?)?;
            println!("{}", path.display());
        }
        Command::Moments => {
            let dir = commands::cmd_moments(&g.run_config()?)?;
            println!("{}", dir.display());
        }
        Command::Estimate { log, moments } => {
            let cfg = g.run_config()?;
            let input = match (log, moments) {
                (Some(p), _) => EstimateInput::Log(p.clone()),
                (None, Some(d)) => EstimateInput::Moments(d.clone()),
                (None, None) => return Err(CliError::config("give --log or --moments")),
            };
            let r = commands::cmd_estimate(&cfg, &input)?;
            println!(
                "converged after {} iterations, residual norm {:e}",
                r.iterations, r.residual_norm
            );
        }
        Command::Experiment { name, topology } => {
            let exp: Experiment = name.parse()?;
            if topology.is_some() && exp != Experiment::One {
                return Err(CliError::config("--topology applies to experiment-1 only"));
            }
            let base = match &g.config {
                Some(_) => g.run_config()?,
                None => RunConfig::default(),
            };
            let opts = ExperimentOptions {
                seed: g.seed.unwrap_or(base.seed),
                m: g.m,
                replications: g.replications,
                beta: g.beta,
                burnin: g.burnin.or(base.burnin),
                full: g.full,
                topology: *topology,
                estimator: base.estimator,
                out: g.out.clone().unwrap_or_else(|| base.out_dir()),
            };
            let start = std::time::Instant::now();
            for path in experiments::run_experiment(exp, &opts)? {
                println!("{}", path.display());
            }
            println!("finished in {:.1} s", start.elapsed().as_secs_f64());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
