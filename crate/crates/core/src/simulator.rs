//! Discrete-event simulation of the network, sampled at Poisson epochs.
//!
//! Only service completions live in the event heap; external arrivals and
//! sampling epochs are single pending times of their Poisson streams.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Exp, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lst::ServiceSampler;
use crate::model::NetworkParams;
use crate::moments::{self, MIN_BETA};

/// How the run is started.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitMode {
    /// Poisson(ϱ_i) customers per station with residual services.
    Stationary,
    /// Empty network, run for `time` before the first sample.
    Burnin { time: f64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SimOptions {
    /// Keep the uncensored populations alongside the observed counts.
    pub keep_true_counts: bool,
    /// Start empty and discard `[0, T]` instead of starting in stationarity.
    pub burnin: Option<f64>,
}

/// Sampled populations: `m` rows of `n` counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationLog {
    pub beta: f64,
    n: usize,
    counts: Vec<u32>,
    true_counts: Option<Vec<u32>>,
    pub seed: u64,
    pub stream: u64,
    pub params_fingerprint: String,
    pub init: InitMode,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    beta: f64,
    n: usize,
    m: usize,
    seed: u64,
    stream: u64,
    params_fingerprint: String,
    init: InitMode,
    #[serde(default)]
    true_counts_file: Option<String>,
}

impl ObservationLog {
    /// Builds a log from rows of counts, e.g. hand-written data.
    pub fn from_rows(beta: f64, rows: &[Vec<u32>]) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if n == 0 {
            return Err(Error::Format("log has no stations".into()));
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: bad.len(),
            });
        }
        Ok(Self {
            beta,
            n,
            counts: rows.concat(),
            true_counts: None,
            seed: 0,
            stream: 0,
            params_fingerprint: String::new(),
            init: InitMode::Stationary,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.counts.len() / self.n
    }

    pub fn row(&self, k: usize) -> &[u32] {
        &self.counts[k * self.n..(k + 1) * self.n]
    }

    /// Row-major `m × n` observed counts.
    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn true_counts(&self) -> Option<&[u32]> {
        self.true_counts.as_deref()
    }

    /// Observed count series of one station.
    pub fn station_series(&self, i: usize) -> Vec<f64> {
        self.counts.iter().skip(i).step_by(self.n).map(|&c| c as f64).collect()
    }

    /// Writes the counts to `path` as CSV and the metadata to the same path
    /// with a `.json` extension. Uncensored counts, when kept, go to
    /// `<stem>.true.csv`.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_counts(path, self.n, &self.counts)?;
        let true_counts_file = match &self.true_counts {
            Some(tc) => {
                let p = true_path(path);
                write_counts(&p, self.n, tc)?;
                p.file_name().map(|f| f.to_string_lossy().into_owned())
            }
            None => None,
        };
        let sidecar = Sidecar {
            beta: self.beta,
            n: self.n,
            m: self.m(),
            seed: self.seed,
            stream: self.stream,
            params_fingerprint: self.params_fingerprint.clone(),
            init: self.init,
            true_counts_file,
        };
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)? + "\n")?;
        Ok(())
    }

    /// Reads what [`ObservationLog::write`] produced.
    pub fn read(path: &Path) -> Result<Self> {
        let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
        let (n, counts) = read_counts(path)?;
        if n != sidecar.n || counts.len() != sidecar.m * n {
            return Err(Error::Format(format!(
                "{}: expected {} rows of {} counts",
                path.display(),
                sidecar.m,
                sidecar.n
            )));
        }
        let true_counts = match &sidecar.true_counts_file {
            Some(name) => {
                let p = path.with_file_name(name);
                let (tn, tc) = read_counts(&p)?;
                if tn != n || tc.len() != counts.len() {
                    return Err(Error::Format(format!("{}: shape differs from counts", p.display())));
                }
                Some(tc)
            }
            None => None,
        };
        Ok(Self {
            beta: sidecar.beta,
            n,
            counts,
            true_counts,
            seed: sidecar.seed,
            stream: sidecar.stream,
            params_fingerprint: sidecar.params_fingerprint,
            init: sidecar.init,
        })
    }

    /// Reads a bare counts CSV (no sidecar) with a caller-supplied rate.
    pub fn read_csv(path: &Path, beta: f64) -> Result<Self> {
        let (n, counts) = read_counts(path)?;
        Ok(Self {
            beta,
            n,
            counts,
            true_counts: None,
            seed: 0,
            stream: 0,
            params_fingerprint: String::new(),
            init: InitMode::Stationary,
        })
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn true_path(path: &Path) -> PathBuf {
    path.with_extension("true.csv")
}

fn write_counts(path: &Path, n: usize, counts: &[u32]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    let mut header = vec!["epoch_index".to_string()];
    header.extend((1..=n).map(|i| format!("station_{i}")));
    w.write_record(&header)?;
    let mut record = Vec::with_capacity(n + 1);
    for (k, row) in counts.chunks_exact(n).enumerate() {
        record.clear();
        record.push(k.to_string());
        record.extend(row.iter().map(u32::to_string));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

fn read_counts(path: &Path) -> Result<(usize, Vec<u32>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.get(0).map(str::trim) != Some("epoch_index") || header.len() < 2 {
        return Err(Error::Format(format!(
            "{}: expected header epoch_index,station_1,...",
            path.display()
        )));
    }
    let n = header.len() - 1;
    let mut counts = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse = |f: &str| {
            f.trim()
                .parse::<u32>()
                .map_err(|e| Error::Format(format!("{} row {}: {e}", path.display(), k + 1)))
        };
        if parse(&rec[0])? as usize != k {
            return Err(Error::Format(format!(
                "{}: epoch indices must run 0, 1, 2, ...",
                path.display()
            )));
        }
        for f in rec.iter().skip(1) {
            counts.push(parse(f)?);
        }
    }
    Ok((n, counts))
}

/// SHA-256 of the canonical JSON form of a parameter point.
pub fn fingerprint(params: &NetworkParams) -> Result<String> {
    Ok(hex::encode(Sha256::digest(params.to_json()?.as_bytes())))
}

/// Remaining service times of the customers present at time zero in
/// stationarity: Poisson(ϱ_i) customers at station `i`, each with a
/// residual service time.
pub fn stationary_init<R: Rng + ?Sized>(params: &NetworkParams, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let samplers = samplers(params)?;
    let rho = moments::loads(params)?;
    rho.iter()
        .zip(&samplers)
        .map(|(&r, s)| {
            if r <= 0.0 {
                return Ok(Vec::new());
            }
            let count = Poisson::new(r)
                .map_err(|e| Error::InvalidParameter(format!("load {r}: {e}")))?
                .sample(rng) as usize;
            Ok((0..count).map(|_| s.residual(rng)).collect())
        })
        .collect()
}

fn samplers(params: &NetworkParams) -> Result<Vec<ServiceSampler>> {
    params.services.iter().map(ServiceSampler::new).collect()
}

#[derive(Debug, Clone, Copy)]
struct Completion {
    time: f64,
    seq: u64,
    station: usize,
}

impl PartialEq for Completion {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Completion {}

impl PartialOrd for Completion {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Completion {
    // Reversed so that `BinaryHeap` pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Index of the first cumulative weight exceeding `u`, or `None` past the end.
fn pick(cumulative: &[f64], u: f64) -> Option<usize> {
    let k = cumulative.partition_point(|&c| c <= u);
    (k < cumulative.len()).then_some(k)
}

struct Network {
    n: usize,
    samplers: Vec<ServiceSampler>,
    routing_cdf: Vec<Vec<f64>>,
    arrival_cdf: Vec<f64>,
    arrival_rate: f64,
    p: Vec<f64>,
}

struct State<'a> {
    net: &'a Network,
    rng: ChaCha8Rng,
    heap: BinaryHeap<Completion>,
    seq: u64,
    pop: Vec<u32>,
    now: f64,
    next_arrival: f64,
}

impl<'a> State<'a> {
    fn enter(&mut self, station: usize, service: f64) {
        self.pop[station] += 1;
        self.seq += 1;
        self.heap.push(Completion {
            time: self.now + service,
            seq: self.seq,
            station,
        });
    }

    fn draw_arrival_gap(&mut self) -> f64 {
        if self.net.arrival_rate > 0.0 {
            Exp::new(self.net.arrival_rate)
                .expect("positive rate")
                .sample(&mut self.rng)
        } else {
            f64::INFINITY
        }
    }

    /// Processes every event strictly before `until`; completions win ties
    /// with arrivals.
    fn advance(&mut self, until: f64) {
        loop {
            let completion = self.heap.peek().map_or(f64::INFINITY, |c| c.time);
            if completion.min(self.next_arrival) >= until {
                break;
            }
            if completion <= self.next_arrival {
                let c = self.heap.pop().expect("peeked");
                self.now = c.time;
                self.pop[c.station] -= 1;
                let u: f64 = self.rng.random();
                if let Some(j) = pick(&self.net.routing_cdf[c.station], u) {
                    let s = self.net.samplers[j].fresh(&mut self.rng);
                    self.enter(j, s);
                }
            } else {
                self.now = self.next_arrival;
                let u: f64 = self.rng.random();
                let j = pick(&self.net.arrival_cdf, u).unwrap_or(self.net.n - 1);
                let s = self.net.samplers[j].fresh(&mut self.rng);
                self.enter(j, s);
                self.next_arrival = self.now + self.draw_arrival_gap();
            }
        }
        self.now = until;
    }
}

fn cumulative(weights: impl Iterator<Item = f64>) -> Vec<f64> {
    weights
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect()
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One run on RNG substream 0 of `seed`.
pub fn simulate(
    params: &NetworkParams,
    beta: f64,
    m: usize,
    seed: u64,
    opts: &SimOptions,
) -> Result<ObservationLog> {
    simulate_stream(params, beta, m, seed, 0, opts)
}

/// `runs` independent logs; run `r` uses substream `r` of `seed`, so the
/// output does not depend on scheduling.
pub fn replicate(
    params: &NetworkParams,
    beta: f64,
    m: usize,
    runs: usize,
    seed: u64,
    opts: &SimOptions,
) -> Result<Vec<ObservationLog>> {
    if runs == 0 {
        return Err(Error::InvalidParameter("at least one run is required".into()));
    }
    (0..runs as u64)
        .into_par_iter()
        .map(|r| simulate_stream(params, beta, m, seed, r, opts))
        .collect()
}

pub fn simulate_stream(
    params: &NetworkParams,
    beta: f64,
    m: usize,
    seed: u64,
    stream: u64,
    opts: &SimOptions,
) -> Result<ObservationLog> {
    if !(beta >= MIN_BETA && beta.is_finite()) {
        return Err(Error::InvalidBeta { beta, min: MIN_BETA });
    }
    if m < 2 {
        return Err(Error::InsufficientData { got: m, need: 2 });
    }
    let report = crate::model::validate(params, crate::model::EstimationMode::KnownServices);
    if let Some(bad) = report
        .failures()
        .find(|c| !matches!(c.name, "flow_in" | "no_self_loops"))
    {
        return Err(Error::InvalidParameter(format!("{}: {}", bad.name, bad.detail)));
    }
    if let Some(t) = opts.burnin {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(Error::InvalidParameter(format!("burn-in time {t}")));
        }
    }
    let n = params.n();
    let arrival_rate: f64 = params.lambda.iter().sum();
    let net = Network {
        n,
        samplers: samplers(params)?,
        routing_cdf: (0..n)
            .map(|i| cumulative((0..n).map(|j| params.q.get(i, j))))
            .collect(),
        arrival_cdf: cumulative(params.lambda.iter().map(|l| l / arrival_rate.max(f64::MIN_POSITIVE))),
        arrival_rate,
        p: params.p.clone(),
    };
    let mut state = State {
        net: &net,
        rng: rng_for(seed, stream),
        heap: BinaryHeap::new(),
        seq: 0,
        pop: vec![0; n],
        now: 0.0,
        next_arrival: f64::INFINITY,
    };
    let (init, start) = match opts.burnin {
        None => {
            for (i, remaining) in stationary_init(params, &mut state.rng)?.into_iter().enumerate() {
                for r in remaining {
                    state.enter(i, r);
                }
            }
            (InitMode::Stationary, 0.0)
        }
        Some(time) => (InitMode::Burnin { time }, time),
    };
    state.next_arrival = state.draw_arrival_gap();
    let gap = Exp::new(beta).map_err(|e| Error::InvalidParameter(format!("beta {beta}: {e}")))?;

    let mut counts = Vec::with_capacity(m * n);
    let mut true_counts = opts.keep_true_counts.then(|| Vec::with_capacity(m * n));
    let mut epoch = start;
    for k in 0..m {
        if k > 0 {
            epoch += gap.sample(&mut state.rng);
        }
        state.advance(epoch);
        for i in 0..n {
            let total = state.pop[i];
            let seen = match net.p[i] {
                p if p >= 1.0 => total,
                p if p <= 0.0 || total == 0 => 0,
                p => Binomial::new(total as u64, p)
                    .expect("valid probability")
                    .sample(&mut state.rng) as u32,
            };
            counts.push(seen);
        }
        if let Some(tc) = true_counts.as_mut() {
            tc.extend_from_slice(&state.pop);
        }
    }
    Ok(ObservationLog {
        beta,
        n,
        counts,
        true_counts,
        seed,
        stream,
        params_fingerprint: fingerprint(params)?,
        init,
    })
}
