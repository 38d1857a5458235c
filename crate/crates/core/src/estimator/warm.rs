//! Starting points for the iterative estimators.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::closed_form::{identify_with_limit, ClosedForm};
use crate::error::{Error, Result};
use crate::lst;
use crate::model::{
    presets, EstimationMode, NetworkParams, ParamLayout, ProjectionConfig, RoutingMatrix,
    ServiceFamily, ServiceModel,
};
use crate::moments::MomentSet;

/// Undoes binomial thinning: `α0 / p` and `α1 / (p pᵀ)`.
pub(crate) fn unthin(moments: &MomentSet, p: &[f64]) -> MomentSet {
    let n = moments.n();
    let scale = |m: &DMatrix<f64>| DMatrix::from_fn(n, n, |j, i| m[(j, i)] / (p[j] * p[i]));
    MomentSet {
        alpha0: DVector::from_fn(n, |i, _| moments.alpha0[i] / p[i]),
        alpha1: scale(&moments.alpha1),
        alpha2: moments.alpha2.as_ref().map(scale),
        source: moments.source,
        epochs: moments.epochs,
    }
}

pub(crate) fn families(template: &NetworkParams) -> Result<Vec<ServiceFamily>> {
    template
        .services
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.family().ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "station {} needs a parametric service family in the template",
                    i + 1
                ))
            })
        })
        .collect()
}

/// Parameter whose isolated-queue autocovariance ratio `1 - 𝒢_res(β)`
/// equals `target`, by bisection on a log scale.
pub(crate) fn match_isolated(family: ServiceFamily, target: f64, beta: f64, bounds: (f64, f64)) -> f64 {
    let f = |eta: f64| {
        lst::bundle(&family.with_parameter(eta), beta)
            .map(|b| 1.0 - b.lst_res - target)
            .unwrap_or(f64::NAN)
    };
    let (mut lo, mut hi) = (bounds.0.ln(), bounds.1.ln());
    let (flo, fhi) = (f(lo.exp()), f(hi.exp()));
    if !(flo * fhi < 0.0) {
        return if flo.abs() < fhi.abs() { lo.exp() } else { hi.exp() };
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid.exp()) * flo > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi)).exp()
}

/// Per-station service guesses from the lag-one autocovariance of each
/// station in isolation: for an M/G/∞ queue `Cov(M(0), M(T_β)) = ϱ (1 - 𝒢_res(β))`.
fn isolated_services(
    moments: &MomentSet,
    families: &[ServiceFamily],
    beta: f64,
    bounds: (f64, f64),
) -> Vec<ServiceModel> {
    families
        .iter()
        .enumerate()
        .map(|(i, &family)| {
            let a0 = moments.alpha0[i];
            let ratio = ((moments.alpha1[(i, i)] - a0 * a0) / a0).clamp(1e-6, 1.0 - 1e-6);
            family.with_parameter(match_isolated(family, ratio, beta, bounds))
        })
        .collect()
}

/// Deterministic starting point for `mode` plus, when it could be formed,
/// the raw closed-form solution it was built from.
pub(crate) fn warm_start(
    moments: &MomentSet,
    mode: EstimationMode,
    beta: f64,
    template: &NetworkParams,
    config: &ProjectionConfig,
    condition_limit: f64,
) -> Result<(NetworkParams, Option<ClosedForm>)> {
    let n = moments.n();
    let p = match mode {
        EstimationMode::WithObservationProbabilities => vec![1.0; n],
        _ => template.p.clone(),
    };
    let full = unthin(moments, &p);
    let services = match mode {
        EstimationMode::KnownServices => template.services.clone(),
        EstimationMode::ParametricServices | EstimationMode::WithObservationProbabilities => {
            isolated_services(&full, &families(template)?, beta, config.service_param_bounds)
        }
        EstimationMode::ModelFree => {
            let exp = vec![ServiceFamily::Exponential; n];
            let (lo, hi) = config.mean_bounds;
            isolated_services(&full, &exp, beta, (1.0 / hi, 1.0 / lo))
                .iter()
                .map(|s| {
                    let b = lst::bundle(s, beta).expect("positive rate");
                    ServiceModel::ModelFree {
                        mean: b.mean,
                        lst_at_beta: b.lst,
                        dlst_at_beta: b.dlst,
                        anchored_beta: beta,
                    }
                })
                .collect()
        }
    };
    let cf = identify_with_limit(&full, &services, beta, condition_limit).ok();
    let mut q = cf.as_ref().map_or_else(|| DMatrix::zeros(n, n), |c| c.q.clone());
    if mode.forbids_self_loops() {
        q.fill_diagonal(0.0);
    }
    q.iter_mut().for_each(|v| *v = v.max(0.0));
    let means: Vec<f64> = services.iter().map(ServiceModel::mean).collect();
    let lambda_eff = DVector::from_fn(n, |i, _| full.alpha0[i] / means[i]);
    let lambda = (DMatrix::identity(n, n) - q.transpose()) * lambda_eff;
    let params = NetworkParams::new(
        RoutingMatrix::new(q)?,
        lambda.iter().copied().collect(),
        services,
        p,
    )?;
    let layout = ParamLayout::new(n, mode, beta);
    let mut raw = layout.pack(&params)?;
    layout.project_raw(&mut raw, config);
    Ok((layout.unpack(&raw, template)?, cf))
}

/// Randomised feasible start: a fresh routing matrix, and the other
/// coordinates of `base` perturbed multiplicatively.
pub(crate) fn random_start(
    base: &[f64],
    layout: &ParamLayout,
    config: &ProjectionConfig,
    seed: u64,
    stream: u64,
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let n = layout.n;
    let mut x = base.to_vec();
    let fill = rng.random_range(0.2..0.9);
    let q = presets::random_routing(&mut rng, n, layout.mode.forbids_self_loops(), fill);
    for (k, (i, j)) in layout.q_coords().into_iter().enumerate() {
        x[k] = q.get(i, j);
    }
    let lo = layout.lambda_offset();
    for v in &mut x[lo..lo + n] {
        *v *= rng.random_range(0.5..1.5);
    }
    let so = layout.service_offset();
    match layout.mode {
        EstimationMode::KnownServices => {}
        EstimationMode::ModelFree => {
            for i in 0..n {
                let mean = x[so + 3 * i] * rng.random_range(-0.7f64..0.7).exp();
                let b = lst::bundle(&ServiceModel::Exponential { rate: 1.0 / mean }, layout.beta)
                    .expect("positive rate");
                x[so + 3 * i..so + 3 * i + 3].copy_from_slice(&[b.mean, b.lst, b.dlst]);
            }
        }
        _ => {
            for v in &mut x[so..so + n] {
                *v *= rng.random_range(-0.7f64..0.7).exp();
            }
        }
    }
    if let Some(po) = layout.p_offset() {
        for v in &mut x[po..po + n] {
            *v = rng.random_range(0.3..1.0);
        }
    }
    layout.project_raw(&mut x, config);
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::presets::Topology;
    use crate::moments::observed_moments;

    #[test]
    fn isolated_match_inverts_the_transform() {
        for family in [
            ServiceFamily::Exponential,
            ServiceFamily::Erlang { shape: 3 },
            ServiceFamily::Deterministic,
        ] {
            let eta = 2.5;
            let b = lst::bundle(&family.with_parameter(eta), 4.0).unwrap();
            let got = match_isolated(family, 1.0 - b.lst_res, 4.0, (1e-3, 1e3));
            assert!((got - eta).abs() < 1e-9, "{family:?} {got}");
        }
    }

    #[test]
    fn isolated_station_is_exact() {
        let params = NetworkParams::observed_fully(
            RoutingMatrix::zeros(2),
            vec![3.0, 1.0],
            presets::exponential(&[2.0, 5.0]),
        )
        .unwrap();
        let mm = observed_moments(&params, 5.0).unwrap();
        let (warm, _) = warm_start(
            &mm,
            EstimationMode::ParametricServices,
            5.0,
            &params,
            &ProjectionConfig::default(),
            1e12,
        )
        .unwrap();
        assert!((warm.services[0].mean() - 0.5).abs() < 1e-9);
        assert!((warm.services[1].mean() - 0.2).abs() < 1e-9);
        assert!((warm.lambda[0] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn starts_are_feasible_and_reproducible() {
        let params = presets::experiment1(Topology::Line);
        let cfg = ProjectionConfig::default();
        for mode in EstimationMode::ALL {
            let mut template = params.clone();
            if mode.forbids_self_loops() {
                template.q.set(0, 0, 0.0);
            }
            let layout = ParamLayout::new(5, mode, 5.0);
            let base = layout.pack(&template).unwrap();
            let a = random_start(&base, &layout, &cfg, 7, 3);
            assert_eq!(a, random_start(&base, &layout, &cfg, 7, 3));
            assert_ne!(a, random_start(&base, &layout, &cfg, 7, 4));
            let theta = layout.unpack(&a, &template).unwrap();
            assert!(crate::model::validate(&theta, mode).bounds_ok(), "{mode}");
        }
    }
}
