use rayon::prelude::*;

use super::residual::psi_stack;
use super::solver::{minimize, LmOptions, LmOutcome};
use super::warm::{families, random_start, warm_start};
use super::{EstimationResult, SolverOptions, StartSummary};
use crate::error::{Error, Result};
use crate::model::{EstimationMode, NetworkParams, ParamLayout};
use crate::moments::MomentSet;

pub(crate) fn check_template(
    moments: &MomentSet,
    mode: EstimationMode,
    template: &NetworkParams,
) -> Result<()> {
    if template.n() != moments.n() {
        return Err(Error::DimensionMismatch {
            expected: moments.n(),
            got: template.n(),
        });
    }
    if matches!(
        mode,
        EstimationMode::ParametricServices | EstimationMode::WithObservationProbabilities
    ) {
        families(template)?;
    }
    Ok(())
}

/// Runs the projected solver from every start in parallel.
pub(crate) fn multi_start<F, P>(
    starts: Vec<Vec<f64>>,
    residual: &F,
    project: &P,
    opts: &SolverOptions,
    sum_groups: Vec<(Vec<usize>, f64)>,
) -> Vec<LmOutcome>
where
    F: Fn(&[f64]) -> Option<nalgebra::DVector<f64>> + Sync,
    P: Fn(&mut [f64]) + Sync,
{
    let lm = LmOptions {
        max_iterations: opts.max_iterations,
        gradient_tol: opts.gradient_tol,
        sum_groups,
    };
    starts
        .par_iter()
        .map(|x0| minimize(residual, project, x0, &lm))
        .collect()
}

/// Index of the lowest residual; ties go to the earlier start.
pub(crate) fn best_index(outcomes: &[LmOutcome]) -> usize {
    outcomes.iter().enumerate().fold(0, |best, (k, o)| {
        if o.residual_norm < outcomes[best].residual_norm {
            k
        } else {
            best
        }
    })
}

pub(crate) fn summaries(outcomes: &[LmOutcome]) -> Vec<StartSummary> {
    outcomes
        .iter()
        .map(|o| StartSummary {
            residual_norm: o.residual_norm,
            iterations: o.iterations,
            converged: o.converged,
        })
        .collect()
}

/// Minimises the stacked moment residual over the mode's parameter set.
/// With known services and `opts.relax_signs`, the iterates may carry
/// negative routing entries and arrival rates; the returned point is
/// projected and its residual is recomputed there.
///
/// Coordinates the mode does not estimate (known services, known `p`, and
/// the families of parametric services) are taken from `template`. The
/// first start is `init` when given, otherwise a deterministic warm start;
/// the remaining `opts.starts - 1` are randomised feasible points.
pub fn estimate_least_squares(
    moments: &MomentSet,
    mode: EstimationMode,
    beta: f64,
    template: &NetworkParams,
    opts: &SolverOptions,
    init: Option<&NetworkParams>,
) -> Result<EstimationResult> {
    check_template(moments, mode, template)?;
    let n = moments.n();
    let layout = ParamLayout::new(n, mode, beta);
    let config = &opts.projection;
    let first = match init {
        Some(p) => p.clone(),
        None => warm_start(moments, mode, beta, template, config, opts.condition_limit)?.0,
    };
    let relax = opts.relax_signs && mode == EstimationMode::KnownServices;
    let project = |x: &mut [f64]| {
        if relax {
            layout.project_relaxed(x, config)
        } else {
            layout.project_euclidean(x, config)
        }
    };
    let mut x0 = layout.pack(&first)?;
    project(&mut x0);
    let mut starts = vec![x0.clone()];
    starts.extend((1..opts.starts.max(1)).map(|s| random_start(&x0, &layout, config, opts.seed, s as u64)));

    let lag2 = mode.lag2_use();
    let residual = |x: &[f64]| {
        let theta = layout.unpack(x, template).ok()?;
        psi_stack(&theta, moments, beta, lag2, &opts.weights).ok()
    };
    // The relaxed projection is not Euclidean on rows, so it gets no groups.
    let groups = if relax { Vec::new() } else { layout.row_groups(config) };
    let mut outcomes = multi_start(starts, &residual, &project, opts, groups);
    // Starts are ranked at their projected end points.
    for o in &mut outcomes {
        let before = o.x.clone();
        layout.project_raw(&mut o.x, config);
        if o.x != before {
            o.residual_norm = residual(&o.x).map_or(f64::INFINITY, |r| r.norm());
        }
    }
    let best = best_index(&outcomes);
    let out = &outcomes[best];
    if !out.residual_norm.is_finite() {
        return Err(Error::DegenerateData(
            "moment equations cannot be evaluated at any start".into(),
        ));
    }
    let theta_hat = layout.unpack(&out.x, template)?;
    let residual_norm = out.residual_norm;
    Ok(EstimationResult {
        mode,
        beta,
        theta_hat,
        residual_norm,
        iterations: out.iterations,
        converged: out.converged,
        best_start: best,
        starts: summaries(&outcomes),
        closed_form: None,
        degenerate_stations: Vec::new(),
        residual_form: None,
    })
}
