use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Lag2Use, NetworkParams};
use crate::moments::{self, MomentSet};

/// Per-block multipliers on the moment equations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockWeights {
    pub alpha0: f64,
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for BlockWeights {
    fn default() -> Self {
        Self {
            alpha0: 1.0,
            alpha1: 1.0,
            alpha2: 1.0,
        }
    }
}

/// Number of stacked equations for `n` stations.
pub fn stack_len(n: usize, lag2: Lag2Use) -> usize {
    n + n * n
        + match lag2 {
            Lag2Use::None => 0,
            Lag2Use::Diagonal => n,
            Lag2Use::Full => n * n,
        }
}

/// Stacked differences `target - model(θ)`: first moments, then the lag-one
/// matrix row-major, then the requested part of the lag-two matrix.
pub fn psi_stack(
    params: &NetworkParams,
    target: &MomentSet,
    beta: f64,
    lag2: Lag2Use,
    weights: &BlockWeights,
) -> Result<DVector<f64>> {
    let n = target.n();
    if params.n() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: params.n(),
        });
    }
    let model = moments::observed_moments(params, beta)?;
    let mut out = Vec::with_capacity(stack_len(n, lag2));
    out.extend((0..n).map(|i| weights.alpha0 * (target.alpha0[i] - model.alpha0[i])));
    for j in 0..n {
        for i in 0..n {
            out.push(weights.alpha1 * (target.alpha1[(j, i)] - model.alpha1[(j, i)]));
        }
    }
    if lag2 != Lag2Use::None {
        let t2 = target
            .alpha2
            .as_ref()
            .ok_or_else(|| Error::Format("moments lack the lag-two block".into()))?;
        let m2 = model.alpha2.as_ref().expect("analytic moments carry lag two");
        for j in 0..n {
            for i in 0..n {
                if lag2 == Lag2Use::Full || i == j {
                    out.push(weights.alpha2 * (t2[(j, i)] - m2[(j, i)]));
                }
            }
        }
    }
    Ok(DVector::from_vec(out))
}
