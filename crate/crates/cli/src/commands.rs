//! The `simulate`, `moments` and `estimate` subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use isnet_core::{
    estimate, estimate_from_moments, moments, simulate, EstimateOptions, EstimationResult, MomentSet,
    MomentSource, ObservationLog, SimOptions,
};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const LOG_FILE: &str = "log.csv";
pub const MOMENTS_FILE: &str = "moments.json";
pub const ESTIMATE_JSON: &str = "estimate.json";
pub const ESTIMATE_CSV: &str = "estimate.csv";

/// Simulates one run and writes `log.csv` (plus its `log.json` sidecar) to
/// the output directory. Returns the CSV path.
pub fn cmd_simulate(cfg: &RunConfig) -> CliResult<PathBuf> {
    let params = cfg.params()?;
    let opts = SimOptions {
        keep_true_counts: cfg.keep_true_counts,
        burnin: cfg.burnin,
    };
    let log = simulate(params, cfg.beta, cfg.m, cfg.seed, &opts)
        .map_err(|e| CliError::from_core(e, CliError::Simulation))?;
    let out = cfg.out_dir();
    fs::create_dir_all(&out)?;
    let path = out.join(LOG_FILE);
    log.write(&path).map_err(CliError::config)?;
    Ok(path)
}

/// Writes the analytic `alpha0.csv`, `alpha1.csv`, `alpha2.csv` and
/// `moments.json` for the configured network and rate.
pub fn cmd_moments(cfg: &RunConfig) -> CliResult<PathBuf> {
    let params = cfg.params()?;
    let set = moments::observed_moments(params, cfg.beta).map_err(CliError::config)?;
    let out = cfg.out_dir();
    set.write_csv_dir(&out).map_err(CliError::config)?;
    fs::write(out.join(MOMENTS_FILE), set.to_json().map_err(CliError::config)? + "\n")?;
    Ok(out)
}

/// Where the estimator's input comes from.
#[derive(Debug, Clone)]
pub enum EstimateInput {
    /// An observation log; a `.json` sidecar next to it supplies the rate.
    Log(PathBuf),
    /// A directory of moment CSVs as written by `moments`.
    Moments(PathBuf),
}

fn read_log(path: &Path, beta: f64) -> CliResult<ObservationLog> {
    if !path.exists() {
        return Err(CliError::Config(format!("{}: no such file", path.display())));
    }
    let read = if path.with_extension("json").exists() {
        ObservationLog::read(path)
    } else {
        ObservationLog::read_csv(path, beta)
    };
    read.map_err(CliError::config)
}

/// Runs the estimator and writes `estimate.json` and `estimate.csv`.
/// Both files are written before a non-convergence is reported.
pub fn cmd_estimate(cfg: &RunConfig, input: &EstimateInput) -> CliResult<EstimationResult> {
    let template = cfg.params()?;
    let mut opts: EstimateOptions = cfg.estimator;
    opts.solver.seed = cfg.seed;
    let to_cli = |e| CliError::from_core(e, CliError::Estimation);
    let result = match input {
        EstimateInput::Log(path) => {
            let log = read_log(path, cfg.beta)?;
            if log.n() != template.n() {
                return Err(CliError::Config(format!(
                    "log has {} stations but the configured network has {}",
                    log.n(),
                    template.n()
                )));
            }
            estimate(&log, cfg.mode, log.beta, template, &opts).map_err(to_cli)?
        }
        EstimateInput::Moments(dir) => {
            let set = MomentSet::read_csv_dir(dir, MomentSource::Analytic).map_err(CliError::config)?;
            estimate_from_moments(&set, cfg.mode, cfg.beta, template, &opts).map_err(to_cli)?
        }
    };
    let out = cfg.out_dir();
    fs::create_dir_all(&out)?;
    result
        .write_files(&out.join(ESTIMATE_JSON), &out.join(ESTIMATE_CSV))
        .map_err(CliError::config)?;
    if !result.converged {
        return Err(CliError::NotConverged {
            residual_norm: result.residual_norm,
        });
    }
    Ok(result)
}
