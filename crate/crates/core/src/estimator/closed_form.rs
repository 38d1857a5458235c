use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, diag};
use crate::lst;
use crate::model::ServiceModel;
use crate::moments::MomentSet;

/// Above this condition number the linear identification step is refused.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Unprojected output of the closed-form inverse map.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosedForm {
    #[serde(serialize_with = "rows")]
    pub q: DMatrix<f64>,
    pub lambda: Vec<f64>,
    pub lambda_eff: Vec<f64>,
    /// Condition number of the matrix inverted to obtain `Q`.
    pub condition: f64,
}

fn rows<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(linalg::to_rows(m))
}

/// Recovers `(Q, λ)` from `alpha0` and `alpha1` of a fully observed network
/// whose service laws are known.
///
/// With `Φ = α0 α0ᵀ + diag α0`, `K = α0 λ_effᵀ / β`, `Ξ₁ = (I - D_𝒢)⁻¹` and
/// `Ξ₂ = -(I - D_𝒢)⁻¹ D_𝒢`, right-multiplying the lag-one relation by
/// `P⁻¹ = Ξ₁ + Ξ₂ Q` leaves the linear system `Ω₁ Q = Ω₂` where
///
/// ```text
/// Ω₁ = α1 Ξ₂ - Φ (D_res + (I - D_res) Ξ₂) + K
/// Ω₂ = -α1 Ξ₁ + Φ (I - D_res) Ξ₁ + K
/// ```
pub fn identify_closed_form(
    moments: &MomentSet,
    services: &[ServiceModel],
    beta: f64,
) -> Result<ClosedForm> {
    identify_with_limit(moments, services, beta, CONDITION_LIMIT)
}

pub fn identify_with_limit(
    moments: &MomentSet,
    services: &[ServiceModel],
    beta: f64,
    condition_limit: f64,
) -> Result<ClosedForm> {
    let n = moments.n();
    if services.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: services.len(),
        });
    }
    let bundles = services
        .iter()
        .map(|s| lst::bundle(s, beta))
        .collect::<Result<Vec<_>>>()?;
    if let Some(i) = bundles.iter().position(|b| !(b.mean > 0.0 && b.mean.is_finite())) {
        return Err(Error::InvalidParameter(format!(
            "station {} has a non-positive mean service time",
            i + 1
        )));
    }
    let a0 = &moments.alpha0;
    let a1 = &moments.alpha1;
    let lambda_eff = DVector::from_fn(n, |i, _| a0[i] / bundles[i].mean);
    let id = DMatrix::<f64>::identity(n, n);
    let d_g = diag(&bundles.iter().map(|b| b.lst).collect::<Vec<_>>());
    let d_res = diag(&bundles.iter().map(|b| b.lst_res).collect::<Vec<_>>());
    let xi1 = diag(&bundles.iter().map(|b| 1.0 / (1.0 - b.lst)).collect::<Vec<_>>());
    let xi2 = -&xi1 * &d_g;
    let phi = a0 * a0.transpose() + DMatrix::from_diagonal(a0);
    let k = a0 * lambda_eff.transpose() / beta;
    let stay = &id - &d_res;
    let omega1 = a1 * &xi2 - &phi * (&d_res + &stay * &xi2) + &k;
    let omega2 = -(a1 * &xi1) + &phi * &stay * &xi1 + &k;
    let condition = linalg::condition_number(&omega1);
    if !(condition <= condition_limit) {
        return Err(Error::IllConditioned { condition });
    }
    let q = linalg::solve(&omega1, &omega2, "closed-form identification")?;
    let lambda = (&id - q.transpose()) * &lambda_eff;
    Ok(ClosedForm {
        q,
        lambda: lambda.iter().copied().collect(),
        lambda_eff: lambda_eff.iter().copied().collect(),
        condition,
    })
}
