//! Exact stationary moments of the population vector sampled at Poisson
//! epochs.
//!
//! Conventions: `alpha1[(j, i)] = E[M_j(0) M_i(T_β)]`, i.e. the row index is
//! the station observed at the earlier epoch and the column index the
//! station observed one (exponential) inter-sampling time later. `alpha2`
//! is the same with an Erlang-2 gap (two sampling epochs later). These
//! matrices are not symmetric in general; the asymmetry is what reveals the
//! direction of routing.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, diag};
use crate::lst;
use crate::model::NetworkParams;

/// Smallest admissible sampling rate; the arrival term carries a `1/β`.
pub const MIN_BETA: f64 = 1e-9;

/// Passage probabilities after an exponential(β) time, from a fresh or a
/// residual service, with their β-derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct PassageMatrices {
    pub p: DMatrix<f64>,
    pub p_res: DMatrix<f64>,
    pub p0: DVector<f64>,
    pub p0_res: DVector<f64>,
    pub dp: DMatrix<f64>,
    pub dp_res: DMatrix<f64>,
}

/// Per-station transform values laid out as diagonals.
struct Transforms {
    mean: Vec<f64>,
    g: DMatrix<f64>,
    dg: DMatrix<f64>,
    g_res: DMatrix<f64>,
    dg_res: DMatrix<f64>,
}

impl Transforms {
    fn new(params: &NetworkParams, beta: f64) -> Result<Self> {
        let bundles = params
            .services
            .iter()
            .map(|s| lst::bundle(s, beta))
            .collect::<Result<Vec<_>>>()?;
        let pick = |f: fn(&lst::TransformBundle) -> f64| -> Vec<f64> { bundles.iter().map(f).collect() };
        Ok(Self {
            mean: pick(|b| b.mean),
            g: diag(&pick(|b| b.lst)),
            dg: diag(&pick(|b| b.dlst)),
            g_res: diag(&pick(|b| b.lst_res)),
            dg_res: diag(&pick(|b| b.dlst_res)),
        })
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta >= MIN_BETA && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidBeta {
            beta,
            min: MIN_BETA,
        })
    }
}

/// Solves the traffic equations `(I - Qᵀ) λ_eff = λ`.
pub fn effective_rates(params: &NetworkParams) -> Result<DVector<f64>> {
    let n = params.n();
    if let Some(i) = params.q.drains().iter().position(|&ok| !ok) {
        return Err(Error::Singular(format!(
            "traffic equations: station {} never drains",
            i + 1
        )));
    }
    let a = DMatrix::identity(n, n) - params.q.matrix().transpose();
    let lambda = DVector::from_column_slice(&params.lambda);
    linalg::solve_vec(&a, &lambda, "traffic equations")
}

/// Mean stationary population `ϱ_i = λ_eff_i E[G_i]`.
pub fn loads(params: &NetworkParams) -> Result<DVector<f64>> {
    let eff = effective_rates(params)?;
    Ok(eff.component_mul(&DVector::from_vec(params.mean_service())))
}

pub fn passage(params: &NetworkParams, beta: f64) -> Result<PassageMatrices> {
    check_beta(beta)?;
    let t = Transforms::new(params, beta)?;
    passage_from(params, &t)
}

fn passage_from(params: &NetworkParams, t: &Transforms) -> Result<PassageMatrices> {
    let n = params.n();
    let q = params.q.matrix();
    let id = DMatrix::<f64>::identity(n, n);
    let a = &id - &t.g * q;
    let lu = a.lu();
    let solve = |rhs: DMatrix<f64>| -> Result<DMatrix<f64>> {
        let x = lu
            .solve(&rhs)
            .ok_or_else(|| Error::Singular("I - diag(G) Q".into()))?;
        if x.iter().all(|v| v.is_finite()) {
            Ok(x)
        } else {
            Err(Error::Singular("I - diag(G) Q".into()))
        }
    };
    let p = solve(&id - &t.g)?;
    let qp = q * &p;
    let p_res = &t.g_res * &qp + (&id - &t.g_res);
    let dp = solve(&t.dg * (&qp - &id))?;
    let dp_res = &t.dg_res * &qp + &t.g_res * q * &dp - &t.dg_res;
    let ones = DVector::from_element(n, 1.0);
    let p0 = &ones - &p * &ones;
    let p0_res = &ones - &p_res * &ones;
    Ok(PassageMatrices {
        p,
        p_res,
        p0,
        p0_res,
        dp,
        dp_res,
    })
}

/// Lag-one and lag-two cross-moment matrices of the uncensored population,
/// sharing one factorisation.
pub fn cross_moments(params: &NetworkParams, beta: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_beta(beta)?;
    let t = Transforms::new(params, beta)?;
    let pm = passage_from(params, &t)?;
    let rho = effective_rates(params)?.component_mul(&DVector::from_vec(t.mean.clone()));
    let lambda = DVector::from_column_slice(&params.lambda);
    let second = &rho * rho.transpose() + DMatrix::from_diagonal(&rho);
    let arrivals = &rho * lambda.transpose();
    let lag1 = &second * &pm.p_res + (&arrivals * &pm.p) / beta;
    let lag2 = &second * (&pm.p_res - &pm.dp_res * beta) + (&arrivals * &pm.p) * (2.0 / beta)
        - &arrivals * &pm.dp;
    Ok((lag1, lag2))
}

/// `E[M(0) M(T_β)ᵀ]`.
pub fn cross_moment_lag1(params: &NetworkParams, beta: f64) -> Result<DMatrix<f64>> {
    Ok(cross_moments(params, beta)?.0)
}

/// `E[M(0) M(E_{β,2})ᵀ]` with an Erlang-2 gap.
pub fn cross_moment_lag2(params: &NetworkParams, beta: f64) -> Result<DMatrix<f64>> {
    Ok(cross_moments(params, beta)?.1)
}

/// Moments of the thinned counts `N`: each customer at station `i` is seen
/// independently with probability `p_i`.
pub fn observed_moments(params: &NetworkParams, beta: f64) -> Result<MomentSet> {
    let rho = loads(params)?;
    let (lag1, lag2) = cross_moments(params, beta)?;
    let p = diag(&params.p);
    Ok(MomentSet {
        alpha0: rho.component_mul(&DVector::from_column_slice(&params.p)),
        alpha1: &p * lag1 * &p,
        alpha2: Some(&p * lag2 * &p),
        source: MomentSource::Analytic,
        epochs: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentSource {
    Analytic,
    Empirical,
}

/// First moments and lag-one / lag-two cross-moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MomentDoc", into = "MomentDoc")]
pub struct MomentSet {
    pub alpha0: DVector<f64>,
    pub alpha1: DMatrix<f64>,
    pub alpha2: Option<DMatrix<f64>>,
    pub source: MomentSource,
    /// Number of sampling epochs behind empirical moments.
    pub epochs: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct MomentDoc {
    source: MomentSource,
    n: usize,
    #[serde(default)]
    epochs: Option<usize>,
    alpha0: Vec<f64>,
    alpha1: Vec<Vec<f64>>,
    #[serde(default)]
    alpha2: Option<Vec<Vec<f64>>>,
}

impl TryFrom<MomentDoc> for MomentSet {
    type Error = Error;

    fn try_from(doc: MomentDoc) -> Result<Self> {
        let set = MomentSet {
            alpha0: DVector::from_vec(doc.alpha0),
            alpha1: linalg::from_rows(&doc.alpha1)?,
            alpha2: doc.alpha2.as_deref().map(linalg::from_rows).transpose()?,
            source: doc.source,
            epochs: doc.epochs,
        };
        set.check_shape()?;
        if set.n() != doc.n {
            return Err(Error::DimensionMismatch {
                expected: doc.n,
                got: set.n(),
            });
        }
        Ok(set)
    }
}

impl From<MomentSet> for MomentDoc {
    fn from(set: MomentSet) -> Self {
        MomentDoc {
            source: set.source,
            n: set.n(),
            epochs: set.epochs,
            alpha0: set.alpha0.iter().copied().collect(),
            alpha1: linalg::to_rows(&set.alpha1),
            alpha2: set.alpha2.as_ref().map(linalg::to_rows),
        }
    }
}

impl MomentSet {
    pub fn n(&self) -> usize {
        self.alpha0.len()
    }

    fn check_shape(&self) -> Result<()> {
        let n = self.n();
        let square = |m: &DMatrix<f64>| m.nrows() == n && m.ncols() == n;
        if !square(&self.alpha1) || !self.alpha2.as_ref().is_none_or(square) {
            return Err(Error::Format(format!("moment matrices must be {n}x{n}")));
        }
        Ok(())
    }

    /// Keeps only the given stations.
    pub fn restrict(&self, keep: &[usize]) -> MomentSet {
        let k = keep.len();
        let sub = |m: &DMatrix<f64>| DMatrix::from_fn(k, k, |a, b| m[(keep[a], keep[b])]);
        MomentSet {
            alpha0: DVector::from_fn(k, |a, _| self.alpha0[keep[a]]),
            alpha1: sub(&self.alpha1),
            alpha2: self.alpha2.as_ref().map(sub),
            source: self.source,
            epochs: self.epochs,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Writes `alpha0.csv`, `alpha1.csv` and (when present) `alpha2.csv`:
    /// a header row of 1-based station indices, then the rows.
    pub fn write_csv_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let n = self.n();
        write_matrix_csv(&dir.join("alpha0.csv"), &DMatrix::from_row_slice(1, n, self.alpha0.as_slice()))?;
        write_matrix_csv(&dir.join("alpha1.csv"), &self.alpha1)?;
        if let Some(a2) = &self.alpha2 {
            write_matrix_csv(&dir.join("alpha2.csv"), a2)?;
        }
        Ok(())
    }

    /// Reads back what [`MomentSet::write_csv_dir`] wrote.
    pub fn read_csv_dir(dir: &Path, source: MomentSource) -> Result<Self> {
        let a0 = read_matrix_csv(&dir.join("alpha0.csv"))?;
        if a0.nrows() != 1 {
            return Err(Error::Format("alpha0.csv must hold a single row".into()));
        }
        let a2_path = dir.join("alpha2.csv");
        let set = MomentSet {
            alpha0: DVector::from_iterator(a0.ncols(), a0.iter().copied()),
            alpha1: read_matrix_csv(&dir.join("alpha1.csv"))?,
            alpha2: if a2_path.exists() {
                Some(read_matrix_csv(&a2_path)?)
            } else {
                None
            },
            source,
            epochs: None,
        };
        set.check_shape()?;
        Ok(set)
    }
}

fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record((1..=m.ncols()).map(|j| j.to_string()))?;
    for i in 0..m.nrows() {
        w.write_record((0..m.ncols()).map(|j| m[(i, j)].to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r
        .records()
        .map(|rec| {
            rec?.iter()
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    linalg::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::presets::{self, Topology};
    use crate::model::{RoutingMatrix, ServiceModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(lambda: f64, q11: f64, service: ServiceModel) -> NetworkParams {
        NetworkParams::observed_fully(
            RoutingMatrix::from_rows(&[vec![q11]]).unwrap(),
            vec![lambda],
            vec![service],
        )
        .unwrap()
    }

    fn tandem() -> NetworkParams {
        NetworkParams::observed_fully(
            RoutingMatrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap(),
            vec![3.0, 0.0],
            presets::exponential(&[2.0, 2.0]),
        )
        .unwrap()
    }

    fn assert_vec(actual: &DVector<f64>, expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        for (a, e) in actual.iter().zip(expected) {
            assert!((a - e).abs() <= tol, "{actual:?} vs {expected:?}");
        }
    }

    /// Mixed service laws on a random network, for checks that must not
    /// lean on exponential special cases.
    fn mixed_network(seed: u64, n: usize) -> NetworkParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = presets::random_network(&mut rng, n, false, 0.9);
        for (i, s) in params.services.iter_mut().enumerate() {
            let mean = s.mean();
            *s = match i % 3 {
                0 => *s,
                1 => ServiceModel::Erlang { shape: 2, rate: 2.0 / mean },
                _ => ServiceModel::Deterministic { duration: mean },
            };
        }
        params
    }

    #[test]
    fn effective_rates_examples() {
        let mut params = presets::experiment1(Topology::Line);
        assert_vec(&effective_rates(&params).unwrap(), &[3.0, 3.5, 5.75, 5.875, 6.9375], 1e-12);
        params.q = RoutingMatrix::zeros(5);
        assert_vec(&effective_rates(&params).unwrap(), &presets::EXP1_LAMBDA, 0.0);
        let one = single(3.0, 0.5, ServiceModel::Exponential { rate: 2.0 });
        assert_vec(&effective_rates(&one).unwrap(), &[6.0], 1e-12);
    }

    #[test]
    fn traffic_equations_reject_non_draining_routing() {
        let mut params = presets::experiment1(Topology::Line);
        params.q = RoutingMatrix::new(DMatrix::identity(5, 5)).unwrap();
        assert!(matches!(effective_rates(&params), Err(Error::Singular(_))));
    }

    #[test]
    fn load_examples() {
        let one = single(3.0, 0.0, ServiceModel::Exponential { rate: 2.0 });
        assert_vec(&loads(&one).unwrap(), &[1.5], 1e-15);
        let params = presets::experiment1(Topology::Line);
        assert_vec(
            &loads(&params).unwrap(),
            &[1.5, 3.5 / 3.0, 5.75 / 3.0, 1.46875, 2.3125],
            1e-12,
        );
        let mut empty = params.clone();
        empty.lambda = vec![0.0; 5];
        assert_vec(&loads(&empty).unwrap(), &[0.0; 5], 0.0);
    }

    #[test]
    fn passage_examples() {
        let one = single(3.0, 0.0, ServiceModel::Exponential { rate: 2.0 });
        let pm = passage(&one, 5.0).unwrap();
        assert!((pm.p[(0, 0)] - 5.0 / 7.0).abs() < 1e-15);
        assert!((pm.p0[0] - 2.0 / 7.0).abs() < 1e-15);

        let pm = passage(&tandem(), 5.0).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[5.0 / 7.0, 10.0 / 49.0, 0.0, 5.0 / 7.0]);
        assert!(linalg::max_abs_diff(&pm.p, &expected) < 1e-15);
    }

    #[test]
    fn exponential_residual_passage_equals_fresh() {
        for topology in Topology::ALL {
            let pm = passage(&presets::experiment1(topology), 5.0).unwrap();
            assert!(linalg::max_abs_diff(&pm.p, &pm.p_res) < 1e-14);
            assert!(linalg::max_abs_diff(&pm.dp, &pm.dp_res) < 1e-14);
        }
    }

    #[test]
    fn single_queue_lag_one_value() {
        let one = single(3.0, 0.0, ServiceModel::Exponential { rate: 2.0 });
        let lag1 = cross_moment_lag1(&one, 5.0).unwrap();
        assert!((lag1[(0, 0)] - 4.65 * 5.0 / 7.0).abs() < 1e-12);
        assert!((lag1[(0, 0)] - 3.3214286).abs() < 1e-7);
    }

    #[test]
    fn single_queue_lag_two_value() {
        let one = single(3.0, 0.0, ServiceModel::Exponential { rate: 2.0 });
        let lag2 = cross_moment_lag2(&one, 5.0).unwrap();
        assert!((lag2[(0, 0)] - 147.75 / 49.0).abs() < 1e-12);
    }

    #[test]
    fn beta_limits() {
        for topology in Topology::ALL {
            let params = presets::experiment1(topology);
            let rho = loads(&params).unwrap();
            let outer = &rho * rho.transpose();
            let second = &outer + DMatrix::from_diagonal(&rho);
            let fast = cross_moment_lag1(&params, 1e6).unwrap();
            assert!(linalg::max_abs_diff(&fast, &second) < 1e-3);
            let slow = cross_moment_lag1(&params, 1e-6).unwrap();
            assert!(linalg::max_abs_diff(&slow, &outer) < 1e-3);
            let slow2 = cross_moment_lag2(&params, 1e-6).unwrap();
            assert!(linalg::max_abs_diff(&slow2, &outer) < 1e-3);
        }
    }

    #[test]
    fn degenerate_beta_rejected() {
        let params = presets::experiment1(Topology::Line);
        assert!(matches!(passage(&params, 1e-10), Err(Error::InvalidBeta { .. })));
        assert!(cross_moment_lag1(&params, 0.0).is_err());
    }

    #[test]
    fn lag_two_matches_finite_difference_of_lag_one() {
        for seed in 0..10 {
            let params = mixed_network(seed, 4);
            for beta in [0.7, 3.0] {
                let h = 1e-4 * beta;
                let l1 = cross_moment_lag1(&params, beta).unwrap();
                let fd = (cross_moment_lag1(&params, beta + h).unwrap()
                    - cross_moment_lag1(&params, beta - h).unwrap())
                    / (2.0 * h);
                let oracle = &l1 - fd * beta;
                let lag2 = cross_moment_lag2(&params, beta).unwrap();
                for (a, b) in lag2.iter().zip(oracle.iter()) {
                    assert!((a - b).abs() <= 1e-4 * b.abs().max(1e-8), "seed {seed}");
                }
            }
        }
    }

    #[test]
    fn observed_moment_examples() {
        let params = presets::experiment1(Topology::Circle);
        let set = observed_moments(&params, 5.0).unwrap();
        let (lag1, lag2) = cross_moments(&params, 5.0).unwrap();
        assert_eq!(set.alpha1, lag1);
        assert_eq!(set.alpha2.unwrap(), lag2);
        assert_eq!(set.alpha0, loads(&params).unwrap());

        let mut one = single(3.0, 0.0, ServiceModel::Exponential { rate: 2.0 });
        one.p = vec![0.5];
        let set = observed_moments(&one, 5.0).unwrap();
        assert!((set.alpha0[0] - 0.75).abs() < 1e-15);
        assert!((set.alpha1[(0, 0)] - 0.25 * 4.65 * 5.0 / 7.0).abs() < 1e-12);
        assert!((set.alpha1[(0, 0)] - 0.8303571).abs() < 1e-7);
    }

    #[test]
    fn tandem_orientation() {
        let lag1 = cross_moment_lag1(&tandem(), 5.0).unwrap();
        assert!(lag1[(0, 1)] > lag1[(1, 0)]);
    }

    #[test]
    fn single_queue_reduction_matches_mg_infinity_formula() {
        for service in [
            ServiceModel::Exponential { rate: 2.0 },
            ServiceModel::Erlang { shape: 3, rate: 4.0 },
            ServiceModel::Deterministic { duration: 0.4 },
        ] {
            let lambda = 3.0;
            let one = single(lambda, 0.0, service);
            for beta in [0.5, 1.0, 5.0] {
                let b = lst::bundle(&service, beta).unwrap();
                let rho = lambda * b.mean;
                let direct = (rho * rho + rho) * (1.0 - b.lst_res) + rho * lambda * (1.0 - b.lst) / beta;
                let lag1 = cross_moment_lag1(&one, beta).unwrap();
                assert!((lag1[(0, 0)] - direct).abs() < 1e-12, "{service:?} beta {beta}");
            }
        }
    }

    #[test]
    fn csv_and_json_round_trip() {
        let set = observed_moments(&presets::experiment1(Topology::Cliques), 5.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        set.write_csv_dir(dir.path()).unwrap();
        let header = std::fs::read_to_string(dir.path().join("alpha1.csv")).unwrap();
        assert!(header.starts_with("1,2,3,4,5\n"));
        let back = MomentSet::read_csv_dir(dir.path(), MomentSource::Analytic).unwrap();
        assert_eq!(back, set);
        let json = set.to_json().unwrap();
        assert_eq!(MomentSet::from_json(&json).unwrap(), set);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn passage_rows_conserve_mass(seed in any::<u64>(), n in 1usize..6) {
                let params = mixed_network(seed, n);
                for beta in [1e-3, 1e-1, 1.0, 10.0, 1e3] {
                    let pm = passage(&params, beta).unwrap();
                    let ones = DVector::from_element(n, 1.0);
                    let total = &pm.p * &ones + &pm.p0;
                    let total_res = &pm.p_res * &ones + &pm.p0_res;
                    for k in 0..n {
                        prop_assert!((total[k] - 1.0).abs() <= 1e-12);
                        prop_assert!((total_res[k] - 1.0).abs() <= 1e-12);
                    }
                    for v in pm.p.iter().chain(pm.p_res.iter()) {
                        prop_assert!((-1e-12..=1.0 + 1e-12).contains(v), "entry {} at beta {}", v, beta);
                    }
                }
            }

            #[test]
            fn passage_is_a_fixed_point(seed in any::<u64>(), n in 1usize..6, beta in 0.05f64..20.0) {
                let params = mixed_network(seed, n);
                let pm = passage(&params, beta).unwrap();
                let g = diag(&params.services.iter().map(|s| lst::bundle(s, beta).unwrap().lst).collect::<Vec<_>>());
                let rhs = &g * params.q.matrix() * &pm.p + DMatrix::identity(n, n) - &g;
                prop_assert!(linalg::max_abs_diff(&pm.p, &rhs) <= 1e-12);
            }

            #[test]
            fn derivatives_match_finite_differences(seed in any::<u64>(), n in 1usize..5, beta in 0.2f64..10.0) {
                let params = mixed_network(seed, n);
                let h = 1e-4 * beta;
                let pm = passage(&params, beta).unwrap();
                let up = passage(&params, beta + h).unwrap();
                let down = passage(&params, beta - h).unwrap();
                let fd = (&up.p - &down.p) / (2.0 * h);
                let fd_res = (&up.p_res - &down.p_res) / (2.0 * h);
                let scale = pm.dp.amax().max(pm.dp_res.amax());
                for (a, b) in pm.dp.iter().zip(fd.iter()).chain(pm.dp_res.iter().zip(fd_res.iter())) {
                    prop_assert!((a - b).abs() <= 1e-4 * a.abs().max(1e-3 * scale), "{} vs {}", a, b);
                }
            }
        }
    }
}
