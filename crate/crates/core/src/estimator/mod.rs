//! From sampled populations to parameter estimates.
//!
//! The pipeline is: empirical moments, a warm start (the closed-form
//! inverse map when services are known, isolated-station matching
//! otherwise), then multi-start projected least squares on the stacked
//! moment equations.

mod closed_form;
mod empirical;
mod least_squares;
mod residual;
mod sequential;
pub mod solver;
mod warm;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use closed_form::{identify_closed_form, ClosedForm, CONDITION_LIMIT};
pub use empirical::empirical_moments;
pub use least_squares::estimate_least_squares;
pub use residual::{psi_stack, stack_len, BlockWeights};
pub use sequential::{estimate_sequential, ResidualForm};

use crate::error::{Error, Result};
use crate::model::{
    EstimationMode, Lag2Use, NetworkParams, ParamLayout, ProjectionConfig, RoutingMatrix,
    ServiceModel,
};
use crate::moments::MomentSet;
use crate::simulator::ObservationLog;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Number of starting points; the first is the warm start.
    pub starts: usize,
    pub max_iterations: usize,
    pub gradient_tol: f64,
    /// Seed for the randomised starts.
    pub seed: u64,
    pub weights: BlockWeights,
    pub projection: ProjectionConfig,
    /// Closed-form identification is skipped above this condition number.
    pub condition_limit: f64,
    /// With known services, iterate with routing entries and arrival rates
    /// allowed to go negative and project onto the feasible set only at the
    /// end. Other modes always iterate inside the feasible set.
    pub relax_signs: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            starts: 8,
            max_iterations: 500,
            gradient_tol: 1e-9,
            seed: 0,
            weights: BlockWeights::default(),
            projection: ProjectionConfig::default(),
            condition_limit: CONDITION_LIMIT,
            relax_signs: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimateOptions {
    pub solver: SolverOptions,
    /// Seed the least-squares fit of the parametric mode with the
    /// sequential scheme when every station is fully observed.
    pub sequential_warm_start: bool,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            solver: SolverOptions::default(),
            sequential_warm_start: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StartSummary {
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub mode: EstimationMode,
    pub beta: f64,
    pub theta_hat: NetworkParams,
    /// Euclidean norm of the stacked moment residual at `theta_hat`.
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Index of the start that produced `theta_hat`.
    pub best_start: usize,
    pub starts: Vec<StartSummary>,
    /// Projected closed-form solution, when it was computable.
    pub closed_form: Option<NetworkParams>,
    /// Zero-based indices of stations never observed occupied; their
    /// routing rows and columns and arrival rates are pinned to zero.
    pub degenerate_stations: Vec<usize>,
    pub residual_form: Option<ResidualForm>,
}

impl EstimationResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// `name,value` rows: `q_i_j`, `lambda_i`, service coordinates, `p_i`
    /// (one-based station numbers), then the diagnostics.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record(["name", "value"])?;
        let t = &self.theta_hat;
        let n = t.n();
        for i in 0..n {
            for j in 0..n {
                w.write_record([format!("q_{}_{}", i + 1, j + 1), t.q.get(i, j).to_string()])?;
            }
        }
        for (i, l) in t.lambda.iter().enumerate() {
            w.write_record([format!("lambda_{}", i + 1), l.to_string()])?;
        }
        for (i, s) in t.services.iter().enumerate() {
            let k = i + 1;
            let fields: Vec<(String, f64)> = match *s {
                ServiceModel::Exponential { rate } => vec![(format!("rate_{k}"), rate)],
                ServiceModel::Erlang { shape, rate } => vec![
                    (format!("shape_{k}"), f64::from(shape)),
                    (format!("rate_{k}"), rate),
                ],
                ServiceModel::Deterministic { duration } => vec![(format!("duration_{k}"), duration)],
                ServiceModel::ModelFree {
                    lst_at_beta,
                    dlst_at_beta,
                    ..
                } => vec![
                    (format!("lst_{k}"), lst_at_beta),
                    (format!("dlst_{k}"), dlst_at_beta),
                ],
            };
            w.write_record([format!("mean_service_{k}"), s.mean().to_string()])?;
            for (name, v) in fields {
                w.write_record([name, v.to_string()])?;
            }
        }
        for (i, p) in t.p.iter().enumerate() {
            w.write_record([format!("p_{}", i + 1), p.to_string()])?;
        }
        w.write_record(["residual_norm".to_string(), self.residual_norm.to_string()])?;
        w.write_record(["iterations".to_string(), self.iterations.to_string()])?;
        w.write_record(["converged".to_string(), u8::from(self.converged).to_string()])?;
        w.flush()?;
        Ok(())
    }

    pub fn write_files(&self, json: &Path, csv: &Path) -> Result<()> {
        std::fs::write(json, self.to_json()?)?;
        self.write_csv(std::fs::File::create(csv)?)
    }
}

/// Stations with zero observed first moment.
fn empty_stations(moments: &MomentSet) -> Vec<usize> {
    (0..moments.n()).filter(|&i| !(moments.alpha0[i] > 0.0)).collect()
}

/// Writes a sub-network estimate back into the full index set.
fn embed(sub: &NetworkParams, keep: &[usize], template: &NetworkParams) -> NetworkParams {
    let mut full = template.clone();
    full.q = RoutingMatrix::zeros(template.n());
    full.lambda = vec![0.0; template.n()];
    for (a, &i) in keep.iter().enumerate() {
        for (b, &j) in keep.iter().enumerate() {
            full.q.set(i, j, sub.q.get(a, b));
        }
        full.lambda[i] = sub.lambda[a];
        full.services[i] = sub.services[a];
        full.p[i] = sub.p[a];
    }
    full
}

/// Full estimation from moments: handles unoccupied stations, builds the
/// warm start (and the closed-form diagnostic), then refines by least
/// squares.
pub fn estimate_from_moments(
    moments: &MomentSet,
    mode: EstimationMode,
    beta: f64,
    template: &NetworkParams,
    opts: &EstimateOptions,
) -> Result<EstimationResult> {
    if template.n() != moments.n() {
        return Err(Error::DimensionMismatch {
            expected: moments.n(),
            got: template.n(),
        });
    }
    let empty = empty_stations(moments);
    if empty.len() == moments.n() {
        return Err(Error::DegenerateData(
            "no station was ever observed occupied".into(),
        ));
    }
    if !empty.is_empty() {
        let keep: Vec<usize> = (0..moments.n()).filter(|i| !empty.contains(i)).collect();
        let mut res = estimate_from_moments(
            &moments.restrict(&keep),
            mode,
            beta,
            &template.restrict(&keep),
            opts,
        )?;
        res.theta_hat = embed(&res.theta_hat, &keep, template);
        res.closed_form = res.closed_form.map(|cf| embed(&cf, &keep, template));
        res.degenerate_stations = empty;
        return Ok(res);
    }

    let solver = &opts.solver;
    let fully_observed = template.p.iter().all(|&p| p == 1.0);
    let mut closed_form = None;
    let init = match mode {
        EstimationMode::KnownServices if fully_observed => {
            match identify_closed_form(moments, &template.services, beta) {
                Ok(cf) => {
                    let layout = ParamLayout::new(moments.n(), mode, beta);
                    let mut raw: Vec<f64> = cf.q.transpose().iter().copied().collect();
                    raw.extend_from_slice(&cf.lambda);
                    let projected =
                        crate::model::project_theta(&raw, &layout, template, &solver.projection)?;
                    closed_form = Some(projected.clone());
                    if solver.relax_signs {
                        Some(NetworkParams::new(
                            RoutingMatrix::new(cf.q)?,
                            cf.lambda,
                            template.services.clone(),
                            template.p.clone(),
                        )?)
                    } else {
                        Some(projected)
                    }
                }
                // Fall back to the generic warm start and random starts.
                Err(Error::IllConditioned { .. } | Error::Singular(_)) => None,
                Err(e) => return Err(e),
            }
        }
        EstimationMode::ParametricServices if fully_observed && opts.sequential_warm_start => {
            estimate_sequential(moments, beta, template, solver)
                .ok()
                .map(|r| r.theta_hat)
        }
        _ => None,
    };
    let mut res = estimate_least_squares(moments, mode, beta, template, solver, init.as_ref())?;
    res.closed_form = closed_form;
    Ok(res)
}

/// Estimates the mode's parameters from a log. Coordinates the mode treats
/// as known come from `template`.
pub fn estimate(
    log: &ObservationLog,
    mode: EstimationMode,
    beta: f64,
    template: &NetworkParams,
    opts: &EstimateOptions,
) -> Result<EstimationResult> {
    if log.n() != template.n() {
        return Err(Error::DimensionMismatch {
            expected: template.n(),
            got: log.n(),
        });
    }
    let moments = empirical_moments(log, mode.lag2_use() != Lag2Use::None)?;
    estimate_from_moments(&moments, mode, beta, template, opts)
}
