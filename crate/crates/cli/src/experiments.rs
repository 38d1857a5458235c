//! Monte Carlo studies: repeated simulate-then-estimate runs with CSV reports.
//!
//! Run `r` of a study uses RNG substream `r` of the seed for simulation and
//! `seed + r` for the solver's multi-start, so reports are byte-identical
//! across thread counts.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use isnet_core::model::presets::{self, Topology};
use isnet_core::model::{param_distance, ServiceModel};
use isnet_core::simulator::simulate_stream;
use isnet_core::stats::{mean_var, median};
use isnet_core::{
    estimate, moments, EstimateOptions, EstimationMode, EstimationResult, NetworkParams, ParamLayout,
    SimOptions,
};
use rayon::prelude::*;

use crate::error::{CliError, CliResult};
use crate::table::{matrix_names, num, nums, vector_names, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    /// Known services on four five-station topologies.
    One,
    /// Partially observed circle: error against the number of observations.
    Two,
    /// Ten-station network with unknown exponential rates.
    Three,
    /// Exponential assumption versus model-free on exponential and Erlang data.
    Four,
}

impl Experiment {
    pub const ALL: [Experiment; 4] = [Experiment::One, Experiment::Two, Experiment::Three, Experiment::Four];

    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::One => "experiment-1",
            Experiment::Two => "experiment-2",
            Experiment::Three => "experiment-3",
            Experiment::Four => "experiment-4",
        }
    }
}

impl FromStr for Experiment {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| CliError::Config(format!("unknown experiment '{s}'")))
    }
}

/// Scale and output settings. `None` fields take the study's default, which
/// `full` raises to the original replication counts.
#[derive(Debug, Clone, Default)]
pub struct ExperimentOptions {
    pub seed: u64,
    pub m: Option<usize>,
    pub replications: Option<usize>,
    pub beta: Option<f64>,
    pub burnin: Option<f64>,
    pub full: bool,
    /// Restricts experiment 1 to one topology.
    pub topology: Option<Topology>,
    pub estimator: EstimateOptions,
    pub out: PathBuf,
}

impl ExperimentOptions {
    fn runs(&self, scaled: usize, full: usize) -> usize {
        self.replications.unwrap_or(if self.full { full } else { scaled })
    }

    fn sim(&self) -> SimOptions {
        SimOptions {
            keep_true_counts: false,
            burnin: self.burnin,
        }
    }
}

/// Edges below this routing probability are left out of adjacency reports.
pub const EDGE_OMIT: f64 = 0.01;
/// Edges below this are drawn dotted.
pub const EDGE_DOTTED: f64 = 0.02;

/// Observation probabilities of the partially observed circle.
pub const EXP2_P: [f64; 5] = [0.9, 0.8, 0.7, 0.85, 0.75];

/// Runs a study and returns the report files it wrote.
pub fn run_experiment(exp: Experiment, opts: &ExperimentOptions) -> CliResult<Vec<PathBuf>> {
    if opts.m.is_some_and(|m| m < 2) {
        return Err(CliError::config("m must be at least 2"));
    }
    if opts.replications == Some(0) {
        return Err(CliError::config("R must be at least 1"));
    }
    if let Some(b) = opts.beta {
        if !(b > 0.0 && b.is_finite()) {
            return Err(CliError::Config(format!("beta must be positive, got {b}")));
        }
    }
    let dir = opts.out.join(exp.as_str());
    match exp {
        Experiment::One => experiment1(opts, &dir),
        Experiment::Two => experiment2(opts, &dir),
        Experiment::Three => experiment3(opts, &dir),
        Experiment::Four => experiment4(opts, &dir),
    }
}

/// One simulate-then-estimate replication. `None` when the estimator
/// rejected the data outright.
pub struct Run {
    pub index: usize,
    pub result: Option<EstimationResult>,
}

impl Run {
    fn status(&self) -> Vec<String> {
        match &self.result {
            Some(r) => vec![r.converged.to_string(), num(r.residual_norm)],
            None => vec!["false".into(), "NaN".into()],
        }
    }
}

pub struct Study<'a> {
    pub truth: &'a NetworkParams,
    pub template: &'a NetworkParams,
    pub mode: EstimationMode,
    pub beta: f64,
    pub m: usize,
    pub runs: usize,
    /// Added to the run index to pick the simulation substream, so that
    /// sweeps over `m` use fresh data for every grid point.
    pub stream_offset: u64,
}

/// Runs the replications in parallel. Simulation failures abort the study;
/// estimation failures are recorded as missing estimates.
pub fn replicate_estimates(study: &Study, opts: &ExperimentOptions) -> CliResult<Vec<Run>> {
    let sim = opts.sim();
    (0..study.runs)
        .into_par_iter()
        .map(|r| {
            let stream = study.stream_offset + r as u64;
            let log = simulate_stream(study.truth, study.beta, study.m, opts.seed, stream, &sim)
                .map_err(|e| CliError::from_core(e, CliError::Simulation))?;
            let mut est = opts.estimator;
            est.solver.seed = opts.seed.wrapping_add(stream);
            let result = estimate(&log, study.mode, study.beta, study.template, &est).ok();
            Ok(Run { index: r, result })
        })
        .collect()
}

fn estimates(runs: &[Run]) -> impl Iterator<Item = &NetworkParams> {
    runs.iter().filter_map(|r| r.result.as_ref().map(|r| &r.theta_hat))
}

fn q_entries(theta: &NetworkParams) -> Vec<f64> {
    theta.q.matrix().transpose().iter().copied().collect()
}

fn rates(theta: &NetworkParams) -> Vec<f64> {
    theta.mean_service().iter().map(|g| 1.0 / g).collect()
}

/// `parameter,true,mean,variance` over the runs that produced an estimate.
fn summary_table(
    names: &[String],
    truth: &[f64],
    draws: &[Vec<f64>],
) -> Table {
    let mut t = Table::new(["parameter", "true", "mean", "variance"]);
    for (k, name) in names.iter().enumerate() {
        let xs: Vec<f64> = draws.iter().map(|d| d[k]).collect();
        let (mean, var) = if xs.is_empty() { (f64::NAN, f64::NAN) } else { mean_var(&xs) };
        t.push(vec![name.clone(), num(truth[k]), num(mean), num(var)]);
    }
    t
}

fn log_progress(label: &str, runs: &[Run]) {
    let ok = runs.iter().filter(|r| r.result.as_ref().is_some_and(|r| r.converged)).count();
    println!("{label}: {ok}/{} runs converged", runs.len());
}

fn experiment1(opts: &ExperimentOptions, dir: &Path) -> CliResult<Vec<PathBuf>> {
    let beta = opts.beta.unwrap_or(5.0);
    let m = opts.m.unwrap_or(250_000);
    let runs = opts.runs(30, 1000);
    let topologies: Vec<Topology> = match opts.topology {
        Some(t) => vec![t],
        None => Topology::ALL.to_vec(),
    };
    let mut files = Vec::new();
    for topo in topologies {
        let truth = presets::experiment1(topo);
        let study = Study {
            truth: &truth,
            template: &truth,
            mode: EstimationMode::KnownServices,
            beta,
            m,
            runs,
            stream_offset: 0,
        };
        let results = replicate_estimates(&study, opts)?;
        log_progress(&format!("experiment-1 {}", topo.as_str()), &results);
        let sub = dir.join(topo.as_str());

        let names: Vec<String> = vector_names("lambda", 5).into_iter().chain(matrix_names("q", 5)).collect();
        let row = |theta: &NetworkParams| -> Vec<f64> {
            theta.lambda.iter().copied().chain(q_entries(theta)).collect()
        };

        let mut header = vec!["run".to_string(), "converged".into(), "residual_norm".into()];
        header.extend(names.iter().cloned());
        let mut t = Table::new(header);
        for run in &results {
            let mut cells = vec![run.index.to_string()];
            cells.extend(run.status());
            match &run.result {
                Some(r) => cells.extend(nums(row(&r.theta_hat))),
                None => cells.extend(vec!["NaN".to_string(); names.len()]),
            }
            t.push(cells);
        }
        let path = sub.join("runs.csv");
        t.write(&path)?;
        files.push(path);

        let draws: Vec<Vec<f64>> = estimates(&results).map(row).collect();
        let path = sub.join("summary.csv");
        summary_table(&names, &row(&truth), &draws).write(&path)?;
        files.push(path);

        let mut t = Table::new(["run", "lambda_1"]);
        for run in &results {
            if let Some(r) = &run.result {
                t.push(vec![run.index.to_string(), num(r.theta_hat.lambda[0])]);
            }
        }
        let path = sub.join("lambda1_draws.csv");
        t.write(&path)?;
        files.push(path);
    }
    Ok(files)
}

/// Edge list of a routing matrix: entries below [`EDGE_OMIT`] are dropped,
/// those below [`EDGE_DOTTED`] are styled `dotted`, the rest `solid`.
pub fn adjacency_table(theta: &NetworkParams) -> Table {
    let mut t = Table::new(["from", "to", "q", "style"]);
    let n = theta.n();
    for i in 0..n {
        for j in 0..n {
            let q = theta.q.get(i, j);
            if q < EDGE_OMIT {
                continue;
            }
            let style = if q < EDGE_DOTTED { "dotted" } else { "solid" };
            t.push(vec![(i + 1).to_string(), (j + 1).to_string(), num(q), style.into()]);
        }
    }
    t
}

fn experiment2(opts: &ExperimentOptions, dir: &Path) -> CliResult<Vec<PathBuf>> {
    let beta = opts.beta.unwrap_or(5.0);
    let runs = opts.runs(5, 5);
    let grid: Vec<usize> = match opts.m {
        Some(m) => vec![m],
        None if opts.full => vec![100_000, 500_000, 1_000_000, 2_000_000, 3_000_000],
        None => vec![100_000, 500_000, 1_000_000],
    };
    let mut truth = presets::experiment1(Topology::Circle);
    truth.p = EXP2_P.to_vec();
    let mut template = truth.clone();
    template.p = vec![1.0; 5];
    template.services = presets::exponential(&[1.0; 5]);
    let layout = ParamLayout::new(5, EstimationMode::WithObservationProbabilities, beta);

    let mut files = Vec::new();
    let path = dir.join("adjacency_true.csv");
    adjacency_table(&truth).write(&path)?;
    files.push(path);

    let mut per_run = Table::new(["m", "run", "converged", "residual_norm", "l1_error"]);
    let mut trend = Table::new(["m", "runs", "median_l1_error", "mean_l1_error"]);
    for (g, &m) in grid.iter().enumerate() {
        let study = Study {
            truth: &truth,
            template: &template,
            mode: EstimationMode::WithObservationProbabilities,
            beta,
            m,
            runs,
            stream_offset: (g * runs) as u64,
        };
        let results = replicate_estimates(&study, opts)?;
        log_progress(&format!("experiment-2 m={m}"), &results);
        let mut errors = Vec::new();
        for run in &results {
            let mut cells = vec![m.to_string(), run.index.to_string()];
            cells.extend(run.status());
            match &run.result {
                Some(r) => {
                    let e = param_distance(&r.theta_hat, &truth, &layout)
                        .map_err(CliError::config)?
                        .0;
                    errors.push(e);
                    cells.push(num(e));
                }
                None => cells.push("NaN".into()),
            }
            per_run.push(cells);
        }
        let (med, mean) = if errors.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            (median(&errors), mean_var(&errors).0)
        };
        trend.push(vec![m.to_string(), errors.len().to_string(), num(med), num(mean)]);
        if let Some(r) = results.first().and_then(|r| r.result.as_ref()) {
            let path = dir.join(format!("adjacency_m{m}.csv"));
            adjacency_table(&r.theta_hat).write(&path)?;
            files.push(path);
        }
    }
    for (name, t) in [("runs.csv", per_run), ("error_vs_m.csv", trend)] {
        let path = dir.join(name);
        t.write(&path)?;
        files.push(path);
    }
    Ok(files)
}

fn experiment3(opts: &ExperimentOptions, dir: &Path) -> CliResult<Vec<PathBuf>> {
    let beta = opts.beta.unwrap_or(10.0);
    let m = opts.m.unwrap_or(2_000_000);
    let runs = opts.runs(1, 1);
    let truth = presets::experiment3(opts.seed);
    let n = truth.n();
    let mut template = truth.clone();
    template.services = presets::exponential(&vec![1.0; n]);
    let study = Study {
        truth: &truth,
        template: &template,
        mode: EstimationMode::ParametricServices,
        beta,
        m,
        runs,
        stream_offset: 0,
    };
    let results = replicate_estimates(&study, opts)?;
    log_progress("experiment-3", &results);

    let names: Vec<String> = vector_names("mu", n)
        .into_iter()
        .chain(vector_names("lambda", n))
        .chain(matrix_names("q", n))
        .collect();
    let row = |theta: &NetworkParams| -> Vec<f64> {
        rates(theta)
            .into_iter()
            .chain(theta.lambda.iter().copied())
            .chain(q_entries(theta))
            .collect()
    };
    let mut files = Vec::new();

    let mut header = vec!["run".to_string(), "converged".into(), "residual_norm".into()];
    header.extend(names.iter().cloned());
    let mut t = Table::new(header);
    for run in &results {
        let mut cells = vec![run.index.to_string()];
        cells.extend(run.status());
        match &run.result {
            Some(r) => cells.extend(nums(row(&r.theta_hat))),
            None => cells.extend(vec!["NaN".to_string(); names.len()]),
        }
        t.push(cells);
    }
    let path = dir.join("runs.csv");
    t.write(&path)?;
    files.push(path);

    let draws: Vec<Vec<f64>> = estimates(&results).map(row).collect();
    let path = dir.join("summary.csv");
    summary_table(&names, &row(&truth), &draws).write(&path)?;
    files.push(path);

    // Station-level tables describe the first run that produced an estimate.
    let Some(first) = estimates(&results).next() else {
        return Ok(files);
    };
    let mu_true = rates(&truth);
    let mu_hat = rates(first);
    let mut t = Table::new(["station", "true", "estimate"]);
    for i in 0..n {
        t.push(vec![(i + 1).to_string(), num(mu_true[i]), num(mu_hat[i])]);
    }
    let path = dir.join("mu.csv");
    t.write(&path)?;
    files.push(path);

    let mut t = Table::new(["from", "to", "true", "estimate", "abs_error"]);
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (truth.q.get(i, j), first.q.get(i, j));
            t.push(vec![(i + 1).to_string(), (j + 1).to_string(), num(a), num(b), num((a - b).abs())]);
        }
    }
    let path = dir.join("q_abs_error.csv");
    t.write(&path)?;
    files.push(path);

    let eff_true = moments::effective_rates(&truth).map_err(CliError::config)?;
    let eff_hat = moments::effective_rates(first).map_err(CliError::config)?;
    let mut t = Table::new(["station", "true", "estimate"]);
    for i in 0..n {
        t.push(vec![(i + 1).to_string(), num(eff_true[i]), num(eff_hat[i])]);
    }
    let path = dir.join("lambda_eff.csv");
    t.write(&path)?;
    files.push(path);
    Ok(files)
}

fn experiment4(opts: &ExperimentOptions, dir: &Path) -> CliResult<Vec<PathBuf>> {
    let beta = opts.beta.unwrap_or(3.0);
    let m = opts.m.unwrap_or(1_000_000);
    let runs = opts.runs(30, 1000);
    let datasets: [(&str, Vec<ServiceModel>); 2] = [
        ("exponential", presets::exponential(&[3.0, 5.0])),
        (
            "erlang2",
            vec![
                ServiceModel::Erlang { shape: 2, rate: 3.0 },
                ServiceModel::Erlang { shape: 2, rate: 5.0 },
            ],
        ),
    ];
    let methods = [
        ("exponential_assumption", EstimationMode::ParametricServices),
        ("model_free", EstimationMode::ModelFree),
    ];
    let names = ["g_1", "g_2", "q_1_2", "q_2_1", "lambda_1", "lambda_2"];
    let row = |theta: &NetworkParams| -> Vec<f64> {
        let g = theta.mean_service();
        vec![g[0], g[1], theta.q.get(0, 1), theta.q.get(1, 0), theta.lambda[0], theta.lambda[1]]
    };

    let mut header = vec!["data".to_string(), "method".into(), "run".into(), "converged".into(), "residual_norm".into()];
    header.extend(names.iter().map(|s| s.to_string()));
    let mut per_run = Table::new(header);
    let mut comparison = Table::new(["data", "method", "parameter", "true", "mean", "variance", "relative_error"]);

    for (d, (data, services)) in datasets.iter().enumerate() {
        let truth = presets::two_station(services.clone());
        let truth_row = row(&truth);
        let template = presets::two_station(presets::exponential(&[1.0, 1.0]));
        for (method, mode) in methods {
            let study = Study {
                truth: &truth,
                template: &template,
                mode,
                beta,
                m,
                runs,
                // Both methods see the same logs for a given data set.
                stream_offset: (d * runs) as u64,
            };
            let results = replicate_estimates(&study, opts)?;
            log_progress(&format!("experiment-4 {data}/{method}"), &results);
            for run in &results {
                let mut cells = vec![data.to_string(), method.to_string(), run.index.to_string()];
                cells.extend(run.status());
                match &run.result {
                    Some(r) => cells.extend(nums(row(&r.theta_hat))),
                    None => cells.extend(vec!["NaN".to_string(); names.len()]),
                }
                per_run.push(cells);
            }
            let draws: Vec<Vec<f64>> = estimates(&results).map(row).collect();
            for (k, name) in names.iter().enumerate() {
                let xs: Vec<f64> = draws.iter().map(|d| d[k]).collect();
                let (mean, var) = if xs.is_empty() { (f64::NAN, f64::NAN) } else { mean_var(&xs) };
                comparison.push(vec![
                    data.to_string(),
                    method.to_string(),
                    name.to_string(),
                    num(truth_row[k]),
                    num(mean),
                    num(var),
                    num((mean - truth_row[k]) / truth_row[k]),
                ]);
            }
        }
    }
    let mut files = Vec::new();
    for (name, t) in [("runs.csv", per_run), ("comparison.csv", comparison)] {
        let path = dir.join(name);
        t.write(&path)?;
        files.push(path);
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for e in Experiment::ALL {
            assert_eq!(e.as_str().parse::<Experiment>().unwrap(), e);
        }
        assert_eq!("experiment-5".parse::<Experiment>().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn adjacency_thresholds() {
        let mut theta = presets::experiment1(Topology::Line);
        theta.q.set(4, 0, 0.015);
        theta.q.set(4, 1, 0.005);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        adjacency_table(&theta).write(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("5,1,0.015,dotted\n"));
        assert!(!text.contains("5,2,"));
        assert!(text.contains("1,2,0.5,solid\n"));
    }
}
