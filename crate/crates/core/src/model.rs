//! The parameter space: routing matrix, external rates, service laws and
//! observation probabilities, together with validation, projection onto the
//! feasible set and the L1 distance used to score estimates.

use std::collections::VecDeque;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Entries (and deficits) below this are treated as structural zeros by the
/// graph checks.
pub const SUPPORT_TOL: f64 = 1e-12;

/// Square matrix of routing probabilities `q_ij`; the row deficit is the exit
/// probability. Construction only checks the shape: estimators may produce
/// raw matrices outside the feasible set, which [`validate`] reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct RoutingMatrix(DMatrix<f64>);

impl RoutingMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                expected: m.nrows(),
                got: m.ncols(),
            });
        }
        Ok(Self(m))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DMatrix::zeros(n, n))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(linalg::from_rows(rows)?)
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.0[(i, j)] = v;
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.0.row(i).sum()
    }

    /// `q_i0 = 1 - Σ_j q_ij`.
    pub fn exit_probabilities(&self) -> DVector<f64> {
        DVector::from_fn(self.n(), |i, _| 1.0 - self.row_sum(i))
    }

    fn successors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n()).filter(move |&j| self.0[(i, j)] > SUPPORT_TOL)
    }

    /// Per station: can a customer starting there eventually leave?
    pub fn drains(&self) -> Vec<bool> {
        let n = self.n();
        // Reverse BFS from the stations with a positive exit probability.
        let mut reached = vec![false; n];
        let mut queue: VecDeque<usize> = (0..n)
            .filter(|&i| 1.0 - self.row_sum(i) > SUPPORT_TOL)
            .collect();
        for &i in &queue {
            reached[i] = true;
        }
        while let Some(j) = queue.pop_front() {
            for i in 0..n {
                if !reached[i] && self.0[(i, j)] > SUPPORT_TOL {
                    reached[i] = true;
                    queue.push_back(i);
                }
            }
        }
        reached
    }

    /// Per station: does work arrive there, directly or along a path from a
    /// station with positive external rate?
    pub fn fed(&self, lambda: &[f64]) -> Vec<bool> {
        let n = self.n();
        let mut reached = vec![false; n];
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| lambda[i] > SUPPORT_TOL).collect();
        for &i in &queue {
            reached[i] = true;
        }
        while let Some(i) = queue.pop_front() {
            for j in self.successors(i).collect::<Vec<_>>() {
                if !reached[j] {
                    reached[j] = true;
                    queue.push_back(j);
                }
            }
        }
        reached
    }
}

impl TryFrom<Vec<Vec<f64>>> for RoutingMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(&rows)
    }
}

impl From<RoutingMatrix> for Vec<Vec<f64>> {
    fn from(q: RoutingMatrix) -> Self {
        linalg::to_rows(&q.0)
    }
}

/// Service-time law of one station.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ServiceModel {
    Exponential {
        rate: f64,
    },
    Erlang {
        shape: u32,
        rate: f64,
    },
    Deterministic {
        duration: f64,
    },
    /// Only the mean and the transform (and its derivative) at one sampling
    /// rate are known.
    ModelFree {
        mean: f64,
        lst_at_beta: f64,
        dlst_at_beta: f64,
        anchored_beta: f64,
    },
}

impl ServiceModel {
    pub fn mean(&self) -> f64 {
        match *self {
            ServiceModel::Exponential { rate } => 1.0 / rate,
            ServiceModel::Erlang { shape, rate } => f64::from(shape) / rate,
            ServiceModel::Deterministic { duration } => duration,
            ServiceModel::ModelFree { mean, .. } => mean,
        }
    }

    pub fn is_sampleable(&self) -> bool {
        !matches!(self, ServiceModel::ModelFree { .. })
    }

    pub fn family(&self) -> Option<ServiceFamily> {
        match *self {
            ServiceModel::Exponential { .. } => Some(ServiceFamily::Exponential),
            ServiceModel::Erlang { shape, .. } => Some(ServiceFamily::Erlang { shape }),
            ServiceModel::Deterministic { .. } => Some(ServiceFamily::Deterministic),
            ServiceModel::ModelFree { .. } => None,
        }
    }

    /// Returns a description of every violated invariant.
    pub fn check(&self, config: &ProjectionConfig) -> Vec<String> {
        let mut issues = Vec::new();
        match *self {
            ServiceModel::Exponential { rate } | ServiceModel::Erlang { rate, .. } => {
                if !(rate > 0.0 && rate.is_finite()) {
                    issues.push(format!("rate {rate} must be positive and finite"));
                }
                if let ServiceModel::Erlang { shape, .. } = *self {
                    if shape < 1 {
                        issues.push("Erlang shape must be at least 1".into());
                    }
                }
            }
            ServiceModel::Deterministic { duration } => {
                if !(duration > 0.0 && duration.is_finite()) {
                    issues.push(format!("duration {duration} must be positive and finite"));
                }
            }
            ServiceModel::ModelFree {
                mean,
                lst_at_beta,
                dlst_at_beta,
                anchored_beta,
            } => {
                let (lo, hi) = config.mean_bounds;
                if !(mean >= lo && mean <= hi) {
                    issues.push(format!("mean {mean} outside [{lo}, {hi}]"));
                }
                if !(lst_at_beta > 0.0 && lst_at_beta < 1.0) {
                    issues.push(format!("transform {lst_at_beta} outside (0, 1)"));
                }
                if !(dlst_at_beta < 0.0) {
                    issues.push(format!("transform derivative {dlst_at_beta} must be negative"));
                }
                if !(anchored_beta > 0.0 && anchored_beta.is_finite()) {
                    issues.push(format!("anchor rate {anchored_beta} must be positive"));
                }
            }
        }
        issues
    }
}

/// One-parameter service family used by the parametric estimation modes.
/// The free parameter is the rate for exponential and Erlang laws and the
/// duration for deterministic ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ServiceFamily {
    Exponential,
    Erlang { shape: u32 },
    Deterministic,
}

impl ServiceFamily {
    pub fn with_parameter(self, eta: f64) -> ServiceModel {
        match self {
            ServiceFamily::Exponential => ServiceModel::Exponential { rate: eta },
            ServiceFamily::Erlang { shape } => ServiceModel::Erlang { shape, rate: eta },
            ServiceFamily::Deterministic => ServiceModel::Deterministic { duration: eta },
        }
    }

    pub fn parameter_of(self, service: &ServiceModel) -> Option<f64> {
        match (self, *service) {
            (ServiceFamily::Exponential, ServiceModel::Exponential { rate }) => Some(rate),
            (ServiceFamily::Erlang { shape: a }, ServiceModel::Erlang { shape: b, rate })
                if a == b =>
            {
                Some(rate)
            }
            (ServiceFamily::Deterministic, ServiceModel::Deterministic { duration }) => {
                Some(duration)
            }
            _ => None,
        }
    }

    /// Parameter value with the given mean service time.
    pub fn parameter_for_mean(self, mean: f64) -> f64 {
        match self {
            ServiceFamily::Exponential => 1.0 / mean,
            ServiceFamily::Erlang { shape } => f64::from(shape) / mean,
            ServiceFamily::Deterministic => mean,
        }
    }
}

/// A full parameter point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsDoc", into = "ParamsDoc")]
pub struct NetworkParams {
    pub q: RoutingMatrix,
    pub lambda: Vec<f64>,
    pub services: Vec<ServiceModel>,
    pub p: Vec<f64>,
}

/// Wire form of [`NetworkParams`]; `p` defaults to all ones.
#[derive(Serialize, Deserialize)]
struct ParamsDoc {
    n: usize,
    #[serde(rename = "Q")]
    q: RoutingMatrix,
    lambda: Vec<f64>,
    services: Vec<ServiceModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p: Option<Vec<f64>>,
}

impl TryFrom<ParamsDoc> for NetworkParams {
    type Error = Error;

    fn try_from(doc: ParamsDoc) -> Result<Self> {
        if doc.q.n() != doc.n {
            return Err(Error::DimensionMismatch {
                expected: doc.n,
                got: doc.q.n(),
            });
        }
        let p = doc.p.unwrap_or_else(|| vec![1.0; doc.n]);
        NetworkParams::new(doc.q, doc.lambda, doc.services, p)
    }
}

impl From<NetworkParams> for ParamsDoc {
    fn from(params: NetworkParams) -> Self {
        ParamsDoc {
            n: params.n(),
            q: params.q,
            lambda: params.lambda,
            services: params.services,
            p: Some(params.p),
        }
    }
}

impl NetworkParams {
    /// Checks only that the lengths agree; see [`validate`] for the rest.
    pub fn new(
        q: RoutingMatrix,
        lambda: Vec<f64>,
        services: Vec<ServiceModel>,
        p: Vec<f64>,
    ) -> Result<Self> {
        let n = q.n();
        for len in [lambda.len(), services.len(), p.len()] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: len,
                });
            }
        }
        Ok(Self {
            q,
            lambda,
            services,
            p,
        })
    }

    /// Fully observed network (`p = 1`).
    pub fn observed_fully(
        q: RoutingMatrix,
        lambda: Vec<f64>,
        services: Vec<ServiceModel>,
    ) -> Result<Self> {
        let n = q.n();
        Self::new(q, lambda, services, vec![1.0; n])
    }

    pub fn n(&self) -> usize {
        self.q.n()
    }

    pub fn mean_service(&self) -> Vec<f64> {
        self.services.iter().map(ServiceModel::mean).collect()
    }

    pub fn is_sampleable(&self) -> bool {
        self.services.iter().all(ServiceModel::is_sampleable)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Copy restricted to the given stations, in order.
    pub fn restrict(&self, keep: &[usize]) -> NetworkParams {
        let q = DMatrix::from_fn(keep.len(), keep.len(), |a, b| self.q.get(keep[a], keep[b]));
        NetworkParams {
            q: RoutingMatrix(q),
            lambda: keep.iter().map(|&i| self.lambda[i]).collect(),
            services: keep.iter().map(|&i| self.services[i]).collect(),
            p: keep.iter().map(|&i| self.p[i]).collect(),
        }
    }
}

/// Which coordinates of the parameter point are unknown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimationMode {
    /// Estimate `Q` and `λ`; services and `p` are given.
    #[serde(rename = "known")]
    KnownServices,
    /// Estimate zero-diagonal `Q`, `λ` and one parameter per service law.
    #[serde(rename = "parametric")]
    ParametricServices,
    /// Estimate zero-diagonal `Q`, `λ` and per-station (mean, transform,
    /// transform derivative) at the sampling rate.
    #[serde(rename = "modelfree")]
    ModelFree,
    /// As `ParametricServices`, plus the observation probabilities.
    #[serde(rename = "withp")]
    WithObservationProbabilities,
}

/// Which part of the lag-two moment matrix a mode fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lag2Use {
    None,
    Diagonal,
    Full,
}

impl EstimationMode {
    pub const ALL: [EstimationMode; 4] = [
        EstimationMode::KnownServices,
        EstimationMode::ParametricServices,
        EstimationMode::ModelFree,
        EstimationMode::WithObservationProbabilities,
    ];

    pub fn forbids_self_loops(self) -> bool {
        !matches!(self, EstimationMode::KnownServices)
    }

    pub fn lag2_use(self) -> Lag2Use {
        match self {
            EstimationMode::ModelFree => Lag2Use::Full,
            EstimationMode::WithObservationProbabilities => Lag2Use::Diagonal,
            _ => Lag2Use::None,
        }
    }

    /// Number of free coordinates for `n` stations.
    pub fn dimension(self, n: usize) -> usize {
        match self {
            EstimationMode::KnownServices | EstimationMode::ParametricServices => n * n + n,
            EstimationMode::ModelFree => n * n + 3 * n,
            EstimationMode::WithObservationProbabilities => n * n + 2 * n,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EstimationMode::KnownServices => "known",
            EstimationMode::ParametricServices => "parametric",
            EstimationMode::ModelFree => "modelfree",
            EstimationMode::WithObservationProbabilities => "withp",
        }
    }
}

impl fmt::Display for EstimationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EstimationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Format(format!("unknown estimation mode '{s}'")))
    }
}

/// Bounds used by validation and projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionConfig {
    /// Cap `Λ` on every external arrival rate.
    pub lambda_max: f64,
    /// Over-full routing rows are rescaled to sum to `1 - exit_margin`.
    pub exit_margin: f64,
    /// Box `[g-, g+]` for model-free mean service times.
    pub mean_bounds: (f64, f64),
    /// Box for the free parameter of parametric service families.
    pub service_param_bounds: (f64, f64),
    /// Keeps model-free transforms strictly inside their open ranges.
    pub transform_margin: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            lambda_max: 100.0,
            exit_margin: 1e-3,
            mean_bounds: (1e-3, 1e3),
            service_param_bounds: (1e-3, 1e3),
            transform_margin: 1e-9,
        }
    }
}

/// Outcome of a single invariant check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Pass/fail per invariant; failures are data, not errors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    /// Everything except the graph conditions (drain, flow-in), which
    /// projection does not repair.
    pub fn bounds_ok(&self) -> bool {
        self.checks
            .iter()
            .filter(|c| c.name != "drain" && c.name != "flow_in")
            .all(|c| c.passed)
    }
}

/// [`validate_with`] under the default bounds.
pub fn validate(params: &NetworkParams, mode: EstimationMode) -> ValidationReport {
    validate_with(params, mode, &ProjectionConfig::default())
}

pub fn validate_with(
    params: &NetworkParams,
    mode: EstimationMode,
    config: &ProjectionConfig,
) -> ValidationReport {
    let n = params.n();
    let mut checks = Vec::new();
    let mut push = |name: &'static str, bad: Vec<String>| {
        checks.push(Check {
            name,
            passed: bad.is_empty(),
            detail: bad.join("; "),
        });
    };

    let lengths_ok = params.lambda.len() == n && params.services.len() == n && params.p.len() == n;
    push(
        "dimensions",
        if lengths_ok {
            vec![]
        } else {
            vec![format!("expected vectors of length {n}")]
        },
    );
    if !lengths_ok {
        return ValidationReport { checks };
    }

    let q = &params.q;
    let mut bad = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let v = q.get(i, j);
            if !(0.0..=1.0).contains(&v) {
                bad.push(format!("q[{}][{}] = {v}", i + 1, j + 1));
            }
        }
    }
    push("q_entries", bad);

    let bad = (0..n)
        .filter_map(|i| {
            let s = q.row_sum(i);
            (s > 1.0 + SUPPORT_TOL).then(|| format!("row {} sums to {s}", i + 1))
        })
        .collect();
    push("sub_stochastic", bad);

    let bad = if mode.forbids_self_loops() {
        (0..n)
            .filter(|&i| q.get(i, i) != 0.0)
            .map(|i| format!("q[{0}][{0}] = {1}", i + 1, q.get(i, i)))
            .collect()
    } else {
        vec![]
    };
    push("no_self_loops", bad);

    let bad = params
        .lambda
        .iter()
        .enumerate()
        .filter(|(_, &l)| !(0.0..=config.lambda_max).contains(&l))
        .map(|(i, l)| format!("lambda[{}] = {l}", i + 1))
        .collect();
    push("lambda_bounds", bad);

    let bad = params
        .p
        .iter()
        .enumerate()
        .filter(|(_, &p)| !(0.0..=1.0).contains(&p))
        .map(|(i, p)| format!("p[{}] = {p}", i + 1))
        .collect();
    push("p_bounds", bad);

    let bad = params
        .services
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            s.check(config)
                .into_iter()
                .map(move |msg| format!("station {}: {msg}", i + 1))
        })
        .collect();
    push("services", bad);

    let bad = q
        .drains()
        .iter()
        .enumerate()
        .filter(|(_, &ok)| !ok)
        .map(|(i, _)| format!("station {} never drains", i + 1))
        .collect();
    push("drain", bad);

    let bad = q
        .fed(&params.lambda)
        .iter()
        .enumerate()
        .filter(|(_, &ok)| !ok)
        .map(|(i, _)| format!("station {} receives no work", i + 1))
        .collect();
    push("flow_in", bad);

    ValidationReport { checks }
}

/// Maps a mode's free coordinates to and from a flat vector.
///
/// Order: routing entries row-major (diagonal skipped when the mode forbids
/// self-loops), then `λ`, then service coordinates (one parameter, or
/// mean/transform/derivative per station for the model-free mode), then `p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamLayout {
    pub n: usize,
    pub mode: EstimationMode,
    /// Sampling rate at which model-free transforms are anchored.
    pub beta: f64,
}

impl ParamLayout {
    pub fn new(n: usize, mode: EstimationMode, beta: f64) -> Self {
        Self { n, mode, beta }
    }

    pub fn dim(&self) -> usize {
        self.mode.dimension(self.n)
    }

    /// Flat positions of the routing entries, as `(i, j)`.
    pub fn q_coords(&self) -> Vec<(usize, usize)> {
        let skip_diag = self.mode.forbids_self_loops();
        (0..self.n)
            .flat_map(|i| (0..self.n).map(move |j| (i, j)))
            .filter(|&(i, j)| !(skip_diag && i == j))
            .collect()
    }

    /// Flat positions of each routing row with the cap on its sum.
    pub fn row_groups(&self, config: &ProjectionConfig) -> Vec<(Vec<usize>, f64)> {
        let coords = self.q_coords();
        let cap = 1.0 - config.exit_margin;
        (0..self.n)
            .map(|i| {
                let idx = coords
                    .iter()
                    .enumerate()
                    .filter(|(_, &(r, _))| r == i)
                    .map(|(k, _)| k)
                    .collect();
                (idx, cap)
            })
            .collect()
    }

    pub fn q_len(&self) -> usize {
        if self.mode.forbids_self_loops() {
            self.n * self.n - self.n
        } else {
            self.n * self.n
        }
    }

    pub fn lambda_offset(&self) -> usize {
        self.q_len()
    }

    pub fn service_offset(&self) -> usize {
        self.q_len() + self.n
    }

    pub fn service_width(&self) -> usize {
        match self.mode {
            EstimationMode::KnownServices => 0,
            EstimationMode::ModelFree => 3,
            _ => 1,
        }
    }

    pub fn p_offset(&self) -> Option<usize> {
        (self.mode == EstimationMode::WithObservationProbabilities)
            .then(|| self.service_offset() + self.n * self.service_width())
    }

    pub fn pack(&self, params: &NetworkParams) -> Result<Vec<f64>> {
        if params.n() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: params.n(),
            });
        }
        let mut raw: Vec<f64> = self
            .q_coords()
            .into_iter()
            .map(|(i, j)| params.q.get(i, j))
            .collect();
        raw.extend_from_slice(&params.lambda);
        match self.mode {
            EstimationMode::KnownServices => {}
            EstimationMode::ModelFree => {
                for s in &params.services {
                    let b = crate::lst::bundle(s, self.beta)?;
                    raw.extend_from_slice(&[b.mean, b.lst, b.dlst]);
                }
            }
            EstimationMode::ParametricServices | EstimationMode::WithObservationProbabilities => {
                for (i, s) in params.services.iter().enumerate() {
                    let eta = s
                        .family()
                        .and_then(|f| f.parameter_of(s))
                        .ok_or_else(|| {
                            Error::InvalidParameter(format!(
                                "station {} has no one-parameter family",
                                i + 1
                            ))
                        })?;
                    raw.push(eta);
                }
            }
        }
        if self.p_offset().is_some() {
            raw.extend_from_slice(&params.p);
        }
        Ok(raw)
    }

    /// Rebuilds a parameter point; coordinates the mode treats as known are
    /// copied from `template`.
    pub fn unpack(&self, raw: &[f64], template: &NetworkParams) -> Result<NetworkParams> {
        if raw.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: raw.len(),
            });
        }
        if template.n() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: template.n(),
            });
        }
        let n = self.n;
        let mut q = RoutingMatrix::zeros(n);
        for (k, (i, j)) in self.q_coords().into_iter().enumerate() {
            q.set(i, j, raw[k]);
        }
        let lo = self.lambda_offset();
        let lambda = raw[lo..lo + n].to_vec();
        let so = self.service_offset();
        let services = match self.mode {
            EstimationMode::KnownServices => template.services.clone(),
            EstimationMode::ModelFree => (0..n)
                .map(|i| ServiceModel::ModelFree {
                    mean: raw[so + 3 * i],
                    lst_at_beta: raw[so + 3 * i + 1],
                    dlst_at_beta: raw[so + 3 * i + 2],
                    anchored_beta: self.beta,
                })
                .collect(),
            EstimationMode::ParametricServices | EstimationMode::WithObservationProbabilities => {
                template
                    .services
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        s.family().map(|f| f.with_parameter(raw[so + i])).ok_or_else(|| {
                            Error::InvalidParameter(format!(
                                "station {} has no one-parameter family",
                                i + 1
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let p = match self.p_offset() {
            Some(po) => raw[po..po + n].to_vec(),
            None => template.p.clone(),
        };
        NetworkParams::new(q, lambda, services, p)
    }

    /// Like [`Self::project_raw`] but lets routing entries fall to `-1` and
    /// arrival rates to `-Λ`. The positive routing entries of a row are still
    /// rescaled when they sum past `1 - exit_margin`.
    pub fn project_relaxed(&self, raw: &mut [f64], config: &ProjectionConfig) {
        let signed = self.q_len() + self.n;
        let saved = raw[..signed].to_vec();
        self.project_raw(raw, config);
        let ql = self.q_len();
        for (k, &v) in saved.iter().enumerate() {
            if v < 0.0 {
                let floor = if k < ql { -1.0 } else { -config.lambda_max };
                raw[k] = v.max(floor);
            }
        }
    }

    /// In-place projection of a flat vector onto the feasible set; see
    /// [`project_theta`].
    pub fn project_raw(&self, raw: &mut [f64], config: &ProjectionConfig) {
        self.project_with(raw, config, RowRule::Rescale);
    }

    /// Same feasible set as [`Self::project_raw`], but each routing row is
    /// mapped to its Euclidean nearest point in `{q >= 0, sum q <= 1 - ε}`.
    /// Projected-gradient arcs under this map descend whenever the point is
    /// not stationary, which the multiplicative rescale does not guarantee.
    pub fn project_euclidean(&self, raw: &mut [f64], config: &ProjectionConfig) {
        self.project_with(raw, config, RowRule::Nearest);
    }

    fn project_with(&self, raw: &mut [f64], config: &ProjectionConfig, rule: RowRule) {
        let n = self.n;
        let so = self.service_offset();
        let is_derivative =
            |k: usize| self.mode == EstimationMode::ModelFree && k >= so && (k - so) % 3 == 2;
        for (k, v) in raw.iter_mut().enumerate() {
            if !is_derivative(k) && (v.is_nan() || *v < 0.0) {
                *v = 0.0;
            }
        }
        // Routing rows.
        let coords = self.q_coords();
        let cap = 1.0 - config.exit_margin;
        for i in 0..n {
            let idx: Vec<usize> = coords
                .iter()
                .enumerate()
                .filter(|(_, &(r, _))| r == i)
                .map(|(k, _)| k)
                .collect();
            for &k in &idx {
                raw[k] = raw[k].min(1.0);
            }
            let sum: f64 = idx.iter().map(|&k| raw[k]).sum();
            // The slack keeps a rescaled row (whose sum may round one ulp
            // above the cap) fixed under a second projection.
            if sum > cap + SUPPORT_TOL {
                match rule {
                    RowRule::Rescale => {
                        let scale = cap / sum;
                        for &k in &idx {
                            raw[k] *= scale;
                        }
                    }
                    RowRule::Nearest => {
                        let tau = simplex_shift(idx.iter().map(|&k| raw[k]), cap);
                        for &k in &idx {
                            raw[k] = (raw[k] - tau).max(0.0);
                        }
                    }
                }
            }
        }
        let lo = self.lambda_offset();
        for v in &mut raw[lo..lo + n] {
            *v = v.min(config.lambda_max);
        }
        match self.mode {
            EstimationMode::KnownServices => {}
            EstimationMode::ModelFree => {
                let eps = config.transform_margin;
                for i in 0..n {
                    let g = raw[so + 3 * i].clamp(config.mean_bounds.0, config.mean_bounds.1);
                    // Jensen: E[e^{-βG}] >= e^{-β E[G]}, which keeps the
                    // residual transform at most one.
                    let l_min = (-self.beta * g).exp().max(eps);
                    let l = raw[so + 3 * i + 1].clamp(l_min, 1.0 - eps);
                    // -E[G e^{-βG}] lies in (-(1 - L)/β, 0).
                    let d_min = -(1.0 - l) / self.beta * (1.0 - eps);
                    let d_raw = raw[so + 3 * i + 2];
                    let d = if d_raw.is_nan() { d_min } else { d_raw };
                    let d = d.clamp(d_min, -eps * (1.0 - l) / self.beta);
                    raw[so + 3 * i] = g;
                    raw[so + 3 * i + 1] = l;
                    raw[so + 3 * i + 2] = d;
                }
            }
            EstimationMode::ParametricServices | EstimationMode::WithObservationProbabilities => {
                let (a, b) = config.service_param_bounds;
                for v in &mut raw[so..so + n] {
                    *v = v.clamp(a, b);
                }
            }
        }
        if let Some(po) = self.p_offset() {
            for v in &mut raw[po..po + n] {
                *v = v.min(1.0);
            }
        }
    }
}

#[derive(Clone, Copy)]
enum RowRule {
    Rescale,
    Nearest,
}

/// The shift `τ` with `sum max(v - τ, 0) = total`, for nonnegative `v`
/// summing to more than `total`.
fn simplex_shift(values: impl Iterator<Item = f64>, total: f64) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut tau = 0.0;
    for (k, &x) in v.iter().enumerate() {
        acc += x;
        let t = (acc - total) / (k + 1) as f64;
        if x - t > 0.0 {
            tau = t;
        } else {
            break;
        }
    }
    tau
}

/// Nearest feasible point under the clipping/rescaling rules: negatives to
/// zero, `λ` capped at `Λ`, `p` capped at one, over-full routing rows scaled
/// down to `1 - exit_margin`, diagonal dropped when self-loops are
/// forbidden, and service coordinates clipped to their boxes.
pub fn project_theta(
    raw: &[f64],
    layout: &ParamLayout,
    template: &NetworkParams,
    config: &ProjectionConfig,
) -> Result<NetworkParams> {
    if raw.len() != layout.dim() {
        return Err(Error::DimensionMismatch {
            expected: layout.dim(),
            got: raw.len(),
        });
    }
    let mut x = raw.to_vec();
    layout.project_raw(&mut x, config);
    layout.unpack(&x, template)
}

/// Entrywise L1 distance over the coordinates a mode estimates.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
pub struct ParamDistance(pub f64);

pub fn param_distance(
    a: &NetworkParams,
    b: &NetworkParams,
    layout: &ParamLayout,
) -> Result<ParamDistance> {
    let xa = layout.pack(a)?;
    let xb = layout.pack(b)?;
    Ok(ParamDistance(
        xa.iter().zip(&xb).map(|(u, v)| (u - v).abs()).sum(),
    ))
}

/// Standard topologies and parameter points used throughout tests and the
/// experiment harness.
pub mod presets {
    use super::*;

    pub const EXP1_LAMBDA: [f64; 5] = [3.0, 2.0, 4.0, 3.0, 4.0];
    pub const EXP1_MU: [f64; 5] = [2.0, 3.0, 3.0, 4.0, 3.0];

    #[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
    #[serde(rename_all = "snake_case")]
    pub enum Topology {
        Line,
        Circle,
        SymmetricCircle,
        Cliques,
    }

    impl Topology {
        pub const ALL: [Topology; 4] = [
            Topology::Line,
            Topology::Circle,
            Topology::SymmetricCircle,
            Topology::Cliques,
        ];

        pub fn as_str(self) -> &'static str {
            match self {
                Topology::Line => "line",
                Topology::Circle => "circle",
                Topology::SymmetricCircle => "symmetric_circle",
                Topology::Cliques => "cliques",
            }
        }

        /// Five-station routing matrix.
        pub fn routing(self) -> RoutingMatrix {
            let mut q = RoutingMatrix::zeros(5);
            match self {
                Topology::Line => {
                    for i in 0..4 {
                        q.set(i, i + 1, 0.5);
                    }
                }
                Topology::Circle => {
                    for i in 0..4 {
                        q.set(i, i + 1, 0.5);
                    }
                    q.set(4, 0, 0.5);
                }
                Topology::SymmetricCircle => {
                    for i in 0..4 {
                        q.set(i, i + 1, 0.25);
                        q.set(i + 1, i, 0.25);
                    }
                    q.set(0, 4, 0.25);
                    q.set(4, 0, 0.25);
                }
                Topology::Cliques => {
                    q.set(0, 1, 0.5);
                    q.set(1, 0, 0.5);
                    q.set(2, 3, 0.5);
                    q.set(4, 3, 0.5);
                    q.set(3, 2, 0.25);
                    q.set(3, 4, 0.25);
                }
            }
            q
        }
    }

    impl std::str::FromStr for Topology {
        type Err = Error;

        fn from_str(s: &str) -> Result<Self> {
            Topology::ALL
                .into_iter()
                .find(|t| t.as_str() == s)
                .ok_or_else(|| Error::Format(format!("unknown topology '{s}'")))
        }
    }

    pub fn exponential(rates: &[f64]) -> Vec<ServiceModel> {
        rates
            .iter()
            .map(|&rate| ServiceModel::Exponential { rate })
            .collect()
    }

    /// Five stations, exponential services with rates (2,3,3,4,3) and
    /// external rates (3,2,4,3,4).
    pub fn experiment1(topology: Topology) -> NetworkParams {
        NetworkParams::observed_fully(
            topology.routing(),
            EXP1_LAMBDA.to_vec(),
            exponential(&EXP1_MU),
        )
        .expect("consistent preset")
    }

    /// Homogeneous directed ring: every station has external rate `lambda`,
    /// exponential rate `mu`, and forwards with probability `q` to its
    /// successor (`clockwise`) or predecessor.
    pub fn ring(n: usize, lambda: f64, mu: f64, q: f64, clockwise: bool) -> NetworkParams {
        let mut routing = RoutingMatrix::zeros(n);
        for i in 0..n {
            let j = if clockwise { (i + 1) % n } else { (i + n - 1) % n };
            routing.set(i, j, q);
        }
        NetworkParams::observed_fully(routing, vec![lambda; n], exponential(&vec![mu; n]))
            .expect("consistent preset")
    }

    /// Two stations feeding each other with probability one half.
    pub fn two_station(services: Vec<ServiceModel>) -> NetworkParams {
        let q = RoutingMatrix::from_rows(&[vec![0.0, 0.5], vec![0.5, 0.0]]).expect("square");
        NetworkParams::observed_fully(q, vec![3.0, 4.0], services).expect("consistent preset")
    }

    pub const EXP3_MU: [f64; 10] = [2.0, 3.0, 3.0, 6.0, 3.0, 4.0, 6.0, 3.0, 2.0, 5.0];
    pub const EXP3_LAMBDA: [f64; 10] = [3.0, 2.0, 4.0, 5.0, 2.0, 6.0, 4.0, 3.0, 2.0, 6.0];

    /// Routing matrix whose rows (allowed routing targets plus an exit atom)
    /// are uniform on the simplex, then scaled by `max_row_sum`.
    pub fn random_routing<R: rand::Rng + ?Sized>(
        rng: &mut R,
        n: usize,
        zero_diagonal: bool,
        max_row_sum: f64,
    ) -> RoutingMatrix {
        use rand_distr::{Distribution, Exp1};
        let mut q = RoutingMatrix::zeros(n);
        for i in 0..n {
            let targets: Vec<usize> = (0..n).filter(|&j| !(zero_diagonal && i == j)).collect();
            let weights: Vec<f64> = (0..=targets.len())
                .map(|_| Exp1.sample(rng))
                .collect();
            let total: f64 = weights.iter().sum();
            for (k, &j) in targets.iter().enumerate() {
                q.set(i, j, max_row_sum * weights[k] / total);
            }
        }
        q
    }

    /// Random fully observed network with exponential services; rates in
    /// `[0.5, 5]`, service rates in `[1, 6]`.
    pub fn random_network<R: rand::Rng + ?Sized>(
        rng: &mut R,
        n: usize,
        zero_diagonal: bool,
        max_row_sum: f64,
    ) -> NetworkParams {
        let q = random_routing(rng, n, zero_diagonal, max_row_sum);
        let lambda = (0..n).map(|_| rng.random_range(0.5..5.0)).collect();
        let mu: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..6.0)).collect();
        NetworkParams::observed_fully(q, lambda, exponential(&mu)).expect("consistent sizes")
    }

    /// Ten stations with the given rates and a uniformly drawn zero-diagonal
    /// sub-stochastic routing matrix.
    pub fn experiment3(seed: u64) -> NetworkParams {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let q = random_routing(&mut rng, 10, true, 1.0);
        NetworkParams::observed_fully(q, EXP3_LAMBDA.to_vec(), exponential(&EXP3_MU))
            .expect("consistent sizes")
    }
}

#[cfg(test)]
mod tests {
    use super::presets::*;
    use super::*;

    fn layout(n: usize, mode: EstimationMode) -> ParamLayout {
        ParamLayout::new(n, mode, 5.0)
    }

    #[test]
    fn line_network_passes_validation() {
        let params = experiment1(Topology::Line);
        let report = validate(&params, EstimationMode::KnownServices);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn identity_routing_fails_drain() {
        let mut params = experiment1(Topology::Line);
        params.q = RoutingMatrix::new(DMatrix::identity(5, 5)).unwrap();
        let report = validate(&params, EstimationMode::KnownServices);
        assert!(!report.check("drain").unwrap().passed);
        assert!(report.check("sub_stochastic").unwrap().passed);
    }

    #[test]
    fn no_arrivals_fails_flow_in_at_first_station() {
        let mut q = RoutingMatrix::zeros(3);
        q.set(1, 0, 0.5);
        q.set(2, 1, 0.5);
        q.set(2, 0, 0.2);
        let params = NetworkParams::observed_fully(q, vec![0.0; 3], exponential(&[1.0; 3])).unwrap();
        let report = validate(&params, EstimationMode::KnownServices);
        let flow = report.check("flow_in").unwrap();
        assert!(!flow.passed);
        assert!(flow.detail.contains("station 1 "));
    }

    #[test]
    fn self_loops_only_rejected_when_mode_forbids() {
        let mut params = experiment1(Topology::Line);
        params.q.set(0, 0, 0.2);
        assert!(validate(&params, EstimationMode::KnownServices).passed());
        let report = validate(&params, EstimationMode::ParametricServices);
        assert!(!report.check("no_self_loops").unwrap().passed);
    }

    #[test]
    fn mode_dimensions() {
        assert_eq!(EstimationMode::KnownServices.dimension(5), 30);
        assert_eq!(EstimationMode::ParametricServices.dimension(5), 30);
        assert_eq!(EstimationMode::ModelFree.dimension(2), 10);
        assert_eq!(EstimationMode::WithObservationProbabilities.dimension(5), 35);
        for mode in EstimationMode::ALL {
            assert_eq!(layout(4, mode).dim(), mode.dimension(4));
        }
    }

    #[test]
    fn feasible_point_projects_to_itself() {
        let params = experiment1(Topology::Circle);
        for mode in [
            EstimationMode::KnownServices,
            EstimationMode::ParametricServices,
            EstimationMode::WithObservationProbabilities,
        ] {
            let l = layout(5, mode);
            let raw = l.pack(&params).unwrap();
            let back = project_theta(&raw, &l, &params, &ProjectionConfig::default()).unwrap();
            assert_eq!(back, params);
        }
    }

    #[test]
    fn negative_rate_clipped_to_zero() {
        let params = experiment1(Topology::Line);
        let l = layout(5, EstimationMode::KnownServices);
        let mut raw = l.pack(&params).unwrap();
        raw[l.lambda_offset()] = -0.2;
        let out = project_theta(&raw, &l, &params, &ProjectionConfig::default()).unwrap();
        assert_eq!(out.lambda[0], 0.0);
    }

    #[test]
    fn over_full_row_rescaled_multiplicatively() {
        let q = RoutingMatrix::from_rows(&[vec![0.6, 0.6], vec![0.0, 0.0]]).unwrap();
        let params = NetworkParams::observed_fully(q, vec![1.0, 1.0], exponential(&[1.0, 1.0])).unwrap();
        let l = layout(2, EstimationMode::KnownServices);
        let raw = l.pack(&params).unwrap();
        let out = project_theta(&raw, &l, &params, &ProjectionConfig::default()).unwrap();
        assert!((out.q.get(0, 0) - 0.4995).abs() < 1e-15);
        assert!((out.q.get(0, 1) - 0.4995).abs() < 1e-15);
    }

    #[test]
    fn json_round_trip_and_default_p() {
        let params = experiment1(Topology::Cliques);
        let json = params.to_json().unwrap();
        assert!(json.contains("\"kind\": \"exponential\""));
        assert_eq!(NetworkParams::from_json(&json).unwrap(), params);

        let doc = r#"{"n":1,"Q":[[0.0]],"lambda":[3.0],"services":[{"kind":"erlang","shape":2,"rate":5.0}]}"#;
        let p = NetworkParams::from_json(doc).unwrap();
        assert_eq!(p.p, vec![1.0]);
        assert_eq!(p.services[0], ServiceModel::Erlang { shape: 2, rate: 5.0 });
    }

    #[test]
    fn unknown_service_kind_rejected() {
        let doc = r#"{"n":1,"Q":[[0.0]],"lambda":[3.0],"services":[{"kind":"pareto","alpha":2.0}]}"#;
        assert!(NetworkParams::from_json(doc).is_err());
    }

    #[test]
    fn inconsistent_n_rejected() {
        let doc = r#"{"n":2,"Q":[[0.0]],"lambda":[3.0],"services":[{"kind":"exponential","rate":1.0}]}"#;
        assert!(NetworkParams::from_json(doc).is_err());
    }

    #[test]
    fn euclidean_row_projection() {
        let l = layout(2, EstimationMode::KnownServices);
        let config = ProjectionConfig::default();
        // Row 1 (0.9, 0.5) -> shift by (1.4 - 0.999) / 2; row 2 (0.0004, 1)
        // -> the small entry drops to zero and the large one to the cap.
        let mut raw = vec![0.9, 0.5, 0.0004, 1.0, 1.0, 1.0];
        l.project_euclidean(&mut raw, &config);
        let tau = (1.4 - 0.999) / 2.0;
        assert!((raw[0] - (0.9 - tau)).abs() < 1e-15 && (raw[1] - (0.5 - tau)).abs() < 1e-15);
        assert_eq!(raw[2], 0.0);
        assert!((raw[3] - 0.999).abs() < 1e-15);
        let again = raw.clone();
        l.project_euclidean(&mut raw, &config);
        assert_eq!(raw, again);
        assert!((simplex_shift([0.6, 0.6].into_iter(), 0.999) - 0.1005).abs() < 1e-15);
    }

    #[test]
    fn model_free_projection_keeps_transforms_consistent() {
        let params = two_station(exponential(&[3.0, 5.0]));
        let l = ParamLayout::new(2, EstimationMode::ModelFree, 3.0);
        let mut raw = l.pack(&params).unwrap();
        let so = l.service_offset();
        raw[so] = 5e3; // mean above g+
        raw[so + 1] = 1.5; // transform above one
        raw[so + 5] = 0.3; // positive derivative
        let out = project_theta(&raw, &l, &params, &ProjectionConfig::default()).unwrap();
        let report = validate(&out, EstimationMode::ModelFree);
        assert!(report.bounds_ok(), "{report:?}");
    }
}
