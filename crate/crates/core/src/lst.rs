//! Laplace–Stieltjes transforms of service times and of their residual
//! (excess-life) laws, and samplers for both.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ServiceModel;

/// Transform values of one service law at one rate `beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TransformBundle {
    pub beta: f64,
    pub mean: f64,
    /// `E[e^{-βG}]`.
    pub lst: f64,
    /// `d/dβ E[e^{-βG}] = -E[G e^{-βG}]`.
    pub dlst: f64,
    /// `(1 - lst) / (β E[G])`.
    pub lst_res: f64,
    /// `-(1 - lst + β dlst) / (β² E[G])`.
    pub dlst_res: f64,
}

/// Relative tolerance when matching a model-free anchor rate.
const ANCHOR_RTOL: f64 = 1e-12;

/// Evaluates mean, transform, derivative and the residual counterparts.
pub fn bundle(service: &ServiceModel, beta: f64) -> Result<TransformBundle> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidBeta { beta, min: 0.0 });
    }
    // `one_minus` is 1 - lst evaluated without cancellation where possible.
    let (mean, lst, one_minus, dlst) = match *service {
        ServiceModel::Exponential { rate } => {
            check_positive("rate", rate)?;
            let lst = rate / (rate + beta);
            (1.0 / rate, lst, beta / (rate + beta), -rate / ((rate + beta) * (rate + beta)))
        }
        ServiceModel::Erlang { shape, rate } => {
            check_positive("rate", rate)?;
            if shape == 0 {
                return Err(Error::InvalidParameter("Erlang shape must be at least 1".into()));
            }
            let k = f64::from(shape);
            let log_ratio = -(beta / rate).ln_1p();
            let lst = (k * log_ratio).exp();
            let dlst = -k * lst / (rate + beta);
            (k / rate, lst, -(k * log_ratio).exp_m1(), dlst)
        }
        ServiceModel::Deterministic { duration } => {
            check_positive("duration", duration)?;
            let lst = (-beta * duration).exp();
            (duration, lst, -(-beta * duration).exp_m1(), -duration * lst)
        }
        ServiceModel::ModelFree {
            mean,
            lst_at_beta,
            dlst_at_beta,
            anchored_beta,
        } => {
            if (beta - anchored_beta).abs() > ANCHOR_RTOL * anchored_beta {
                return Err(Error::UnanchoredBeta {
                    requested: beta,
                    anchored: anchored_beta,
                });
            }
            check_positive("mean", mean)?;
            (mean, lst_at_beta, 1.0 - lst_at_beta, dlst_at_beta)
        }
    };
    Ok(TransformBundle {
        beta,
        mean,
        lst,
        dlst,
        lst_res: one_minus / (beta * mean),
        dlst_res: -(one_minus + beta * dlst) / (beta * beta * mean),
    })
}

fn check_positive(what: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{what} must be positive, got {v}")))
    }
}

/// Pre-built sampler for one station's fresh and residual service times.
#[derive(Debug, Clone)]
pub enum ServiceSampler {
    Exponential(Exp<f64>),
    Erlang { shape: u32, phase: Exp<f64> },
    Deterministic(f64),
}

impl ServiceSampler {
    pub fn new(service: &ServiceModel) -> Result<Self> {
        if service.is_sampleable() {
            if let Some(issue) = service.check(&Default::default()).into_iter().next() {
                return Err(Error::InvalidParameter(issue));
            }
        }
        let exp = |rate: f64| {
            Exp::new(rate).map_err(|e| Error::InvalidParameter(format!("rate {rate}: {e}")))
        };
        match *service {
            ServiceModel::Exponential { rate } => Ok(Self::Exponential(exp(rate)?)),
            ServiceModel::Erlang { shape, rate } => Ok(Self::Erlang {
                shape,
                phase: exp(rate)?,
            }),
            ServiceModel::Deterministic { duration } => Ok(Self::Deterministic(duration)),
            ServiceModel::ModelFree { .. } => Err(Error::NotSampleable(
                "a transform triple does not determine a distribution".into(),
            )),
        }
    }

    pub fn fresh<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Self::Exponential(d) => d.sample(rng),
            Self::Erlang { shape, phase } => (0..*shape).map(|_| phase.sample(rng)).sum(),
            Self::Deterministic(d) => *d,
        }
    }

    /// Draw from the excess-life density `(1 - G(s)) / E[G]`.
    pub fn residual<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Self::Exponential(d) => d.sample(rng),
            // Equilibrium law of an Erlang(k, μ) is the uniform mixture of
            // Erlang(j, μ), j = 1..k.
            Self::Erlang { shape, phase } => {
                let j = rng.random_range(1..=*shape);
                (0..j).map(|_| phase.sample(rng)).sum()
            }
            Self::Deterministic(d) => d * rng.random::<f64>(),
        }
    }
}

pub fn sample_service<R: Rng + ?Sized>(service: &ServiceModel, rng: &mut R) -> Result<f64> {
    Ok(ServiceSampler::new(service)?.fresh(rng))
}

pub fn sample_residual<R: Rng + ?Sized>(service: &ServiceModel, rng: &mut R) -> Result<f64> {
    Ok(ServiceSampler::new(service)?.residual(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const EXP2: ServiceModel = ServiceModel::Exponential { rate: 2.0 };
    const ERL25: ServiceModel = ServiceModel::Erlang { shape: 2, rate: 5.0 };
    const DET1: ServiceModel = ServiceModel::Deterministic { duration: 1.0 };

    fn sampleable() -> Vec<ServiceModel> {
        vec![
            EXP2,
            ERL25,
            DET1,
            ServiceModel::Erlang { shape: 3, rate: 1.5 },
            ServiceModel::Deterministic { duration: 0.3 },
        ]
    }

    fn mean_of(n: usize, mut f: impl FnMut() -> f64) -> f64 {
        (0..n).map(|_| f()).sum::<f64>() / n as f64
    }

    #[test]
    fn exponential_closed_form() {
        let b = bundle(&EXP2, 5.0).unwrap();
        assert!((b.lst - 2.0 / 7.0).abs() < 1e-15);
        assert!((b.mean - 0.5).abs() < 1e-15);
        assert!((b.dlst + 2.0 / 49.0).abs() < 1e-15);
    }

    #[test]
    fn exponential_residual_equals_fresh() {
        for beta in [0.1, 1.0, 5.0, 40.0] {
            let b = bundle(&ServiceModel::Exponential { rate: 3.7 }, beta).unwrap();
            assert!((b.lst_res - b.lst).abs() < 1e-14);
            assert!((b.dlst_res - b.dlst).abs() < 1e-14);
        }
    }

    #[test]
    fn erlang_residual_transform() {
        let b = bundle(&ERL25, 3.0).unwrap();
        assert!((b.lst - 0.390625).abs() < 1e-15);
        assert!((b.lst_res - 0.5078125).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_beta_and_unanchored_model_free() {
        assert!(matches!(bundle(&EXP2, 0.0), Err(Error::InvalidBeta { .. })));
        assert!(bundle(&EXP2, -1.0).is_err());
        let mf = ServiceModel::ModelFree {
            mean: 0.5,
            lst_at_beta: 0.4,
            dlst_at_beta: -0.05,
            anchored_beta: 3.0,
        };
        let b = bundle(&mf, 3.0).unwrap();
        assert_eq!((b.mean, b.lst, b.dlst), (0.5, 0.4, -0.05));
        assert!(matches!(bundle(&mf, 6.0), Err(Error::UnanchoredBeta { .. })));
    }

    #[test]
    fn residual_identities_recomputed() {
        for s in sampleable() {
            for beta in [0.5, 1.0, 5.0] {
                let b = bundle(&s, beta).unwrap();
                let res = (1.0 - b.lst) / (beta * b.mean);
                let dres = -(1.0 - b.lst + beta * b.dlst) / (beta * beta * b.mean);
                assert!((b.lst_res - res).abs() < 1e-13, "{s:?}");
                assert!((b.dlst_res - dres).abs() < 1e-12 * dres.abs().max(1.0), "{s:?}");
            }
        }
    }

    #[test]
    fn derivative_matches_central_differences() {
        for s in sampleable() {
            for beta in [0.5, 1.0, 5.0] {
                let h = 1e-4 * beta;
                let fd = (bundle(&s, beta + h).unwrap().lst - bundle(&s, beta - h).unwrap().lst)
                    / (2.0 * h);
                let d = bundle(&s, beta).unwrap().dlst;
                assert!((fd - d).abs() <= 1e-5 * d.abs(), "{s:?} beta={beta}");
            }
        }
    }

    #[test]
    fn transform_limits() {
        for s in sampleable() {
            assert!((bundle(&s, 1e-6).unwrap().lst - 1.0).abs() < 1e-4);
            assert!(bundle(&s, 1e6).unwrap().lst < 1e-4);
        }
    }

    #[test]
    fn monte_carlo_transform_within_four_standard_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        for s in sampleable() {
            let sampler = ServiceSampler::new(&s).unwrap();
            for beta in [0.5, 1.0, 5.0] {
                let draws: Vec<f64> = (0..n).map(|_| (-beta * sampler.fresh(&mut rng)).exp()).collect();
                let mean = draws.iter().sum::<f64>() / n as f64;
                let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                let se = (var / n as f64).sqrt().max(1e-12);
                let exact = bundle(&s, beta).unwrap().lst;
                assert!((mean - exact).abs() <= 4.0 * se, "{s:?} beta={beta}");
            }
        }
    }

    #[test]
    fn deterministic_draws_are_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sample_service(&DET1, &mut rng).unwrap(), 1.0);
        }
    }

    #[test]
    fn sample_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 1_000_000;
        let exp = ServiceSampler::new(&EXP2).unwrap();
        assert!((mean_of(n, || exp.fresh(&mut rng)) - 0.5).abs() < 0.002);
        let erl = ServiceSampler::new(&ERL25).unwrap();
        assert!((mean_of(n, || erl.fresh(&mut rng)) - 0.4).abs() < 0.001);
    }

    #[test]
    fn residual_sample_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let det = ServiceSampler::new(&DET1).unwrap();
        assert!((mean_of(n, || det.residual(&mut rng)) - 0.5).abs() < 0.001);
        // E[G^2] / (2 E[G]) = (6/25) / 0.8
        let erl = ServiceSampler::new(&ERL25).unwrap();
        assert!((mean_of(n, || erl.residual(&mut rng)) - 0.3).abs() < 0.001);
        // memoryless: residual has the fresh mean
        let exp = ServiceSampler::new(&EXP2).unwrap();
        assert!((mean_of(n, || exp.residual(&mut rng)) - 0.5).abs() < 0.002);
    }

    #[test]
    fn model_free_is_not_sampleable() {
        let mf = ServiceModel::ModelFree {
            mean: 0.5,
            lst_at_beta: 0.4,
            dlst_at_beta: -0.05,
            anchored_beta: 3.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_service(&mf, &mut rng), Err(Error::NotSampleable(_))));
        assert!(matches!(sample_residual(&mf, &mut rng), Err(Error::NotSampleable(_))));
    }
}
