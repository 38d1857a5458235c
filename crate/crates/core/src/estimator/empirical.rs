use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::moments::{MomentSet, MomentSource};
use crate::simulator::ObservationLog;

/// Rows per parallel chunk; sums are exact integers, so the reduction order
/// cannot change the result.
const CHUNK: usize = 1 << 14;

struct Sums {
    first: Vec<u128>,
    lag1: Vec<u128>,
    lag2: Vec<u128>,
}

impl Sums {
    fn zeros(n: usize) -> Self {
        Self {
            first: vec![0; n],
            lag1: vec![0; n * n],
            lag2: vec![0; n * n],
        }
    }

    fn add(mut self, other: Sums) -> Sums {
        for (a, b) in self
            .first
            .iter_mut()
            .chain(self.lag1.iter_mut())
            .chain(self.lag2.iter_mut())
            .zip(other.first.iter().chain(&other.lag1).chain(&other.lag2))
        {
            *a += b;
        }
        self
    }
}

fn accumulate(acc: &mut [u128], earlier: &[u32], later: &[u32]) {
    let n = earlier.len();
    for (j, &a) in earlier.iter().enumerate() {
        if a == 0 {
            continue;
        }
        let row = &mut acc[j * n..(j + 1) * n];
        for (slot, &b) in row.iter_mut().zip(later) {
            *slot += u128::from(a) * u128::from(b);
        }
    }
}

/// Sample averages of `N_k`, `N_k N_{k+1}ᵀ` and (optionally)
/// `N_k N_{k+2}ᵀ`; entry `(j, i)` pairs station `j` at the earlier epoch
/// with station `i` at the later one.
pub fn empirical_moments(log: &ObservationLog, need_lag2: bool) -> Result<MomentSet> {
    let m = log.m();
    let need = if need_lag2 { 3 } else { 2 };
    if m < need {
        return Err(Error::InsufficientData { got: m, need });
    }
    let n = log.n();
    let sums = (0..m.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut s = Sums::zeros(n);
            for k in c * CHUNK..((c + 1) * CHUNK).min(m) {
                let row = log.row(k);
                for (f, &v) in s.first.iter_mut().zip(row) {
                    *f += u128::from(v);
                }
                if k + 1 < m {
                    accumulate(&mut s.lag1, row, log.row(k + 1));
                }
                if need_lag2 && k + 2 < m {
                    accumulate(&mut s.lag2, row, log.row(k + 2));
                }
            }
            s
        })
        .reduce(|| Sums::zeros(n), Sums::add);
    let avg = |v: &[u128], d: usize| DMatrix::from_fn(n, n, |j, i| v[j * n + i] as f64 / d as f64);
    Ok(MomentSet {
        alpha0: DVector::from_iterator(n, sums.first.iter().map(|&s| s as f64 / m as f64)),
        alpha1: avg(&sums.lag1, m - 1),
        alpha2: need_lag2.then(|| avg(&sums.lag2, m - 2)),
        source: MomentSource::Empirical,
        epochs: Some(m),
    })
}
