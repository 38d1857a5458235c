use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use super::least_squares::{best_index, check_template, summaries};
use super::solver::{minimize, LmOptions};
use super::residual::psi_stack;
use super::warm::{families, random_start, warm_start};
use super::{EstimationResult, SolverOptions};
use crate::error::{Error, Result};
use crate::linalg::{self, diag};
use crate::lst;
use crate::model::{
    EstimationMode, Lag2Use, NetworkParams, ParamLayout, RoutingMatrix, ServiceFamily,
};
use crate::moments::{self, MomentSet};

/// Above this condition number of `t₁ D_res Q + t₂` the direct residual is
/// used instead of the reordered one.
const REORDER_CONDITION_LIMIT: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualForm {
    /// `(t₁ D_res Q + t₂)⁻¹ (α1 - t₁ (I - D_res)) - t₃`
    Reordered,
    /// `α1 - t₁ (I - D_res) - (t₁ D_res Q + t₂) t₃`
    Direct,
}

struct Sequential<'a> {
    n: usize,
    beta: f64,
    families: Vec<ServiceFamily>,
    a1: &'a DMatrix<f64>,
    t1: DMatrix<f64>,
    outer: DMatrix<f64>,
    coords: Vec<(usize, usize)>,
}

impl Sequential<'_> {
    /// Unknowns: off-diagonal routing entries row-major, then one service
    /// parameter per station.
    fn split(&self, z: &[f64]) -> (DMatrix<f64>, Vec<f64>) {
        let mut q = DMatrix::zeros(self.n, self.n);
        for (k, &(i, j)) in self.coords.iter().enumerate() {
            q[(i, j)] = z[k];
        }
        (q, z[self.coords.len()..].to_vec())
    }

    /// `(t₁ D_res Q + t₂, t₁ (I - D_res), t₃)`.
    fn terms(&self, z: &[f64]) -> Option<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
        let (q, eta) = self.split(z);
        let services: Vec<_> = self
            .families
            .iter()
            .zip(&eta)
            .map(|(f, &e)| f.with_parameter(e))
            .collect();
        let bundles = services
            .iter()
            .map(|s| lst::bundle(s, self.beta))
            .collect::<crate::Result<Vec<_>>>()
            .ok()?;
        let d_res = diag(&bundles.iter().map(|b| b.lst_res).collect::<Vec<_>>());
        let inv_mean = diag(&bundles.iter().map(|b| 1.0 / b.mean).collect::<Vec<_>>());
        let id = DMatrix::<f64>::identity(self.n, self.n);
        let t2 = &self.outer * inv_mean * (&id - &q) / self.beta;
        let params = NetworkParams::observed_fully(
            RoutingMatrix::new(q.clone()).ok()?,
            vec![0.0; self.n],
            services,
        )
        .ok()?;
        let t3 = moments::passage(&params, self.beta).ok()?.p;
        let factor = &self.t1 * &d_res * &q + t2;
        let base = &self.t1 * (&id - &d_res);
        Some((factor, base, t3))
    }

    fn residual(&self, z: &[f64], form: ResidualForm) -> Option<DVector<f64>> {
        let (factor, base, t3) = self.terms(z)?;
        let r = match form {
            ResidualForm::Reordered => {
                linalg::solve(&factor, &(self.a1 - base), "reordered factor").ok()? - t3
            }
            ResidualForm::Direct => self.a1 - base - factor * t3,
        };
        Some(DVector::from_iterator(r.len(), r.transpose().iter().copied()))
    }

    fn form_at(&self, z: &[f64]) -> ResidualForm {
        match self.terms(z) {
            Some((factor, _, _)) if linalg::condition_number(&factor) <= REORDER_CONDITION_LIMIT => {
                ResidualForm::Reordered
            }
            _ => ResidualForm::Direct,
        }
    }
}

/// Fits zero-diagonal `Q` and one service parameter per station from the
/// `n²` lag-one equations alone, then reads `λ` off the first moments:
/// `λ = (I - Qᵀ) D_E[G]⁻¹ α0`. Requires full observation (`p = 1`).
///
/// With `t₁ = α0 α0ᵀ + diag α0`, `t₂ = β⁻¹ α0 α0ᵀ D_E[G]⁻¹ (I - Q)` and
/// `t₃ = P`, the lag-one relation reads `α1 = t₁ (I - D_res) + (t₁ D_res Q + t₂) t₃`.
pub fn estimate_sequential(
    moments: &MomentSet,
    beta: f64,
    template: &NetworkParams,
    opts: &SolverOptions,
) -> Result<EstimationResult> {
    let mode = EstimationMode::ParametricServices;
    check_template(moments, mode, template)?;
    if template.p.iter().any(|&p| p != 1.0) {
        return Err(Error::InvalidParameter(
            "the sequential scheme needs fully observed stations (p = 1)".into(),
        ));
    }
    let n = moments.n();
    let a0 = &moments.alpha0;
    let outer = a0 * a0.transpose();
    let layout = ParamLayout::new(n, mode, beta);
    let coords = layout.q_coords();
    let problem = Sequential {
        n,
        beta,
        families: families(template)?,
        a1: &moments.alpha1,
        t1: &outer + DMatrix::from_diagonal(a0),
        outer,
        coords,
    };
    let config = &opts.projection;
    // The full layout carries λ between Q and the service parameters; it is
    // not an unknown here and sits at zero while projecting.
    let ql = layout.q_len();
    let to_full = |z: &[f64]| -> Vec<f64> {
        let mut x = z[..ql].to_vec();
        x.extend(std::iter::repeat_n(0.0, n));
        x.extend_from_slice(&z[ql..]);
        x
    };
    let from_full = |x: &[f64]| -> Vec<f64> {
        let mut z = x[..ql].to_vec();
        z.extend_from_slice(&x[ql + n..]);
        z
    };
    let project = |z: &mut [f64]| {
        let mut x = to_full(z);
        layout.project_euclidean(&mut x, config);
        z.copy_from_slice(&from_full(&x));
    };

    let (warm, _) = warm_start(moments, mode, beta, template, config, opts.condition_limit)?;
    let x0 = layout.pack(&warm)?;
    let mut starts = vec![from_full(&x0)];
    starts.extend(
        (1..opts.starts.max(1)).map(|s| from_full(&random_start(&x0, &layout, config, opts.seed, s as u64))),
    );
    let forms: Vec<ResidualForm> = starts.iter().map(|z| problem.form_at(z)).collect();
    // Each start keeps the residual form chosen at its initial point.
    let lm = LmOptions {
        max_iterations: opts.max_iterations,
        gradient_tol: opts.gradient_tol,
        // The routing coordinates lead both `z` and the full vector.
        sum_groups: layout.row_groups(config),
    };
    let mut runs: Vec<_> = starts
        .par_iter()
        .zip(forms.par_iter())
        .map(|(z, &form)| minimize(&|z: &[f64]| problem.residual(z, form), &project, z, &lm))
        .collect();
    // Each start is finished to a projected parameter point and ranked by
    // the stacked moment residual there.
    let finish = |z: &[f64]| -> Option<(NetworkParams, f64)> {
        let (q, eta) = problem.split(z);
        let means: Vec<f64> = problem
            .families
            .iter()
            .zip(&eta)
            .map(|(f, &e)| f.with_parameter(e).mean())
            .collect();
        let lambda_eff = DVector::from_fn(n, |i, _| a0[i] / means[i]);
        let lambda = (DMatrix::identity(n, n) - q.transpose()) * lambda_eff;
        let mut x = z[..ql].to_vec();
        x.extend(lambda.iter());
        x.extend_from_slice(&z[ql..]);
        layout.project_raw(&mut x, config);
        let theta = layout.unpack(&x, template).ok()?;
        let norm = psi_stack(&theta, moments, beta, Lag2Use::None, &opts.weights).ok()?.norm();
        norm.is_finite().then_some((theta, norm))
    };
    let finished: Vec<_> = runs.par_iter().map(|o| finish(&o.x)).collect();
    for (o, f) in runs.iter_mut().zip(&finished) {
        o.residual_norm = f.as_ref().map_or(f64::INFINITY, |(_, r)| *r);
    }
    let best = best_index(&runs);
    let Some((theta_hat, residual_norm)) = finished[best].clone() else {
        return Err(Error::DegenerateData(
            "cross-moment equations cannot be evaluated at any start".into(),
        ));
    };
    let out = &runs[best];
    Ok(EstimationResult {
        mode,
        beta,
        theta_hat,
        residual_norm,
        iterations: out.iterations,
        converged: out.converged,
        best_start: best,
        starts: summaries(&runs),
        closed_form: None,
        degenerate_stations: Vec::new(),
        residual_form: Some(forms[best]),
    })
}
