//! Monte Carlo engine shared by the covariance and trajectory simulators.

use std::sync::Arc;
use std::time::Instant;

use aoi_sched::bounds::necessary_stability;
use aoi_sched::linalg::cholesky_factor;
use aoi_sched::plant::{error_cov_from_aoi, SensorModel};
use aoi_sched::sched::Scheduler;
use aoi_sched::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{stream_rng, Metric, SimConfig, Stream};

/// AoI histogram bins per sensor; the last bin collects every larger AoI.
pub const HISTOGRAM_BINS: usize = 128;
/// Per-step cost above which a run counts as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e12;
/// Batches used for the confidence interval of a single long run.
const BATCHES: usize = 20;
/// Two-sided 95% Student-t quantile with `BATCHES - 1` degrees of freedom.
const BATCH_T95: f64 = 2.093;
/// Runs simulated in parallel before their tallies are merged.
const BLOCK: usize = 512;

/// Summary of a Monte Carlo experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub policy: String,
    pub metric: Metric,
    pub sensors: usize,
    pub channels: usize,
    pub runs: usize,
    pub horizon: usize,
    pub warmup: usize,
    /// Average over non-diverged runs of the time-averaged summed cost.
    pub mean_j: f64,
    /// Half-width of the 95% confidence interval of `mean_j`.
    pub ci95: f64,
    /// Fraction of counted steps in which each sensor was scheduled.
    pub per_sensor_attempt_rate: Vec<f64>,
    /// Fraction of counted steps in which each sensor delivered an update.
    pub per_sensor_success_rate: Vec<f64>,
    pub per_sensor_attempts: Vec<u64>,
    pub per_sensor_successes: Vec<u64>,
    /// `aoi_histogram[i][k]` counts counted steps with AoI `k + 1`.
    pub aoi_histogram: Vec<Vec<u64>>,
    /// Mean wall time of one scheduling decision, in seconds.
    pub wall_time_per_decision: f64,
    pub diverged_runs: usize,
    /// Sensors that fail the necessary stability condition.
    pub unstable_sensors: Vec<usize>,
}

impl SimReport {
    /// Delivered fraction of scheduled attempts for sensor `i`.
    pub fn channel_success_rate(&self, i: usize) -> f64 {
        self.per_sensor_successes[i] as f64 / self.per_sensor_attempts[i] as f64
    }

    /// Normalized AoI histogram of sensor `i`.
    pub fn aoi_pmf(&self, i: usize) -> Vec<f64> {
        let total: u64 = self.aoi_histogram[i].iter().sum();
        self.aoi_histogram[i].iter().map(|&c| c as f64 / total as f64).collect()
    }

    /// True when every statistic except wall time matches bit for bit.
    pub fn same_statistics(&self, other: &Self) -> bool {
        let strip = |r: &Self| Self { wall_time_per_decision: 0.0, ..r.clone() };
        let (a, b) = (strip(self), strip(other));
        a.mean_j.to_bits() == b.mean_j.to_bits() && a.ci95.to_bits() == b.ci95.to_bits() && a == b
    }
}

/// Simulates the AoI chain and accumulates `f(delta)` or `Tr(P(delta))`.
pub fn run_covariance_sim(sensors: &[SensorModel], config: &SimConfig) -> Result<SimReport> {
    let model = match config.metric {
        Metric::AoiFunctionCost => TableCost::aoi_function(sensors),
        Metric::TraceOfP => TableCost::trace(sensors),
        Metric::EmpiricalSquaredError => {
            return Err(Error::Unsupported("the empirical squared error needs run_trajectory_sim".into()))
        }
    };
    run(sensors, config, config.metric, &model)
}

/// Simulates plant states, local Kalman filters and the remote estimator and
/// accumulates the squared remote estimation error. The configured metric is
/// ignored; the report always carries [`Metric::EmpiricalSquaredError`].
///
/// Channel draws use the same streams as [`run_covariance_sim`], so with the
/// same seed both simulators see identical AoI paths.
pub fn run_trajectory_sim(sensors: &[SensorModel], config: &SimConfig) -> Result<SimReport> {
    let model = Trajectory::new(sensors)?;
    run(sensors, config, Metric::EmpiricalSquaredError, &model)
}

/// Runs whichever simulator the configured metric needs.
pub fn simulate(sensors: &[SensorModel], config: &SimConfig) -> Result<SimReport> {
    match config.metric {
        Metric::EmpiricalSquaredError => run_trajectory_sim(sensors, config),
        _ => run_covariance_sim(sensors, config),
    }
}

trait CostModel: Sync {
    type State: Send;

    fn init(&self, rng: &mut ChaCha8Rng) -> Self::State;

    /// Advances sensor `i` by one step and returns its cost at the new AoI.
    fn step(&self, state: &mut Self::State, i: usize, delivered: bool, delta: u32, rng: &mut ChaCha8Rng) -> f64;
}

const TABLE_LEN: usize = 256;

struct TableCost {
    tables: Vec<Vec<f64>>,
    tail: Vec<Box<dyn Fn(u32) -> f64 + Send + Sync>>,
}

impl TableCost {
    fn aoi_function(sensors: &[SensorModel]) -> Self {
        Self::build(sensors, |s| {
            let f = s.aoi_function();
            Box::new(move |d| f.value(d))
        })
    }

    fn trace(sensors: &[SensorModel]) -> Self {
        Self::build(sensors, |s| {
            let s = s.clone();
            Box::new(move |d| s.trace_at(d))
        })
    }

    fn build(sensors: &[SensorModel], make: impl Fn(&SensorModel) -> Box<dyn Fn(u32) -> f64 + Send + Sync>) -> Self {
        let tail: Vec<_> = sensors.iter().map(make).collect();
        let tables = tail.iter().map(|f| (1..=TABLE_LEN as u32).map(f).collect()).collect();
        Self { tables, tail }
    }
}

impl CostModel for TableCost {
    type State = ();

    fn init(&self, _rng: &mut ChaCha8Rng) {}

    fn step(&self, _state: &mut (), i: usize, _delivered: bool, delta: u32, _rng: &mut ChaCha8Rng) -> f64 {
        match self.tables[i].get(delta as usize - 1) {
            Some(&c) => c,
            None => (self.tail[i])(delta),
        }
    }
}

/// Per-sensor matrices of the error dynamics.
struct TrajectorySensor {
    a: DMatrix<f64>,
    /// `I - K C`.
    f: DMatrix<f64>,
    k: DMatrix<f64>,
    lq: DMatrix<f64>,
    lr: DMatrix<f64>,
    l_local: DMatrix<f64>,
    l_remote: DMatrix<f64>,
}

struct Trajectory {
    sensors: Vec<TrajectorySensor>,
}

impl Trajectory {
    fn new(sensors: &[SensorModel]) -> Result<Self> {
        let sensors = sensors
            .iter()
            .map(|s| {
                let plant = &s.plant;
                let k = s.filter.k_bar.clone();
                let n = plant.n();
                Ok(TrajectorySensor {
                    a: plant.a.clone(),
                    f: DMatrix::identity(n, n) - &k * &plant.c,
                    k,
                    lq: cholesky_factor(&plant.q, "Q")?,
                    lr: cholesky_factor(&plant.r, "R")?,
                    l_local: cholesky_factor(&s.filter.p_bar, "steady-state covariance")?,
                    l_remote: cholesky_factor(&error_cov_from_aoi(plant, &s.filter, 1)?, "remote covariance")?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { sensors })
    }
}

/// Local and remote estimation errors of one sensor plus scratch space.
struct ErrorState {
    local: DVector<f64>,
    remote: DVector<f64>,
    z_state: DVector<f64>,
    z_meas: DVector<f64>,
    w: DVector<f64>,
    v: DVector<f64>,
    prior: DVector<f64>,
    scratch: DVector<f64>,
}

fn fill_normal(z: &mut DVector<f64>, rng: &mut ChaCha8Rng) {
    for x in z.iter_mut() {
        *x = rng.sample(StandardNormal);
    }
}

impl CostModel for Trajectory {
    type State = Vec<ErrorState>;

    fn init(&self, rng: &mut ChaCha8Rng) -> Vec<ErrorState> {
        self.sensors
            .iter()
            .map(|s| {
                let n = s.a.nrows();
                let m = s.lr.nrows();
                let mut z = DVector::zeros(n);
                fill_normal(&mut z, rng);
                let local = &s.l_local * &z;
                fill_normal(&mut z, rng);
                let remote = &s.l_remote * &z;
                ErrorState {
                    local,
                    remote,
                    z_state: DVector::zeros(n),
                    z_meas: DVector::zeros(m),
                    w: DVector::zeros(n),
                    v: DVector::zeros(m),
                    prior: DVector::zeros(n),
                    scratch: DVector::zeros(n),
                }
            })
            .collect()
    }

    fn step(&self, state: &mut Vec<ErrorState>, i: usize, delivered: bool, _delta: u32, rng: &mut ChaCha8Rng) -> f64 {
        let s = &self.sensors[i];
        let e = &mut state[i];
        fill_normal(&mut e.z_state, rng);
        fill_normal(&mut e.z_meas, rng);
        e.w.gemv(1.0, &s.lq, &e.z_state, 0.0);
        e.v.gemv(1.0, &s.lr, &e.z_meas, 0.0);
        // Prior error of the local filter, which is also the remote error
        // when the previous local estimate arrives.
        e.prior.gemv(1.0, &s.a, &e.local, 0.0);
        e.prior += &e.w;
        if delivered {
            e.remote.copy_from(&e.prior);
        } else {
            e.scratch.gemv(1.0, &s.a, &e.remote, 0.0);
            e.scratch += &e.w;
            std::mem::swap(&mut e.remote, &mut e.scratch);
        }
        e.local.gemv(1.0, &s.f, &e.prior, 0.0);
        e.local.gemv(-1.0, &s.k, &e.v, 1.0);
        e.remote.norm_squared()
    }
}

struct RunTally {
    /// Time-averaged cost, `None` when the run diverged.
    j: Option<f64>,
    batch_means: Vec<f64>,
    attempts: Vec<u64>,
    successes: Vec<u64>,
    histogram: Vec<u64>,
    decide_ns: u128,
    decisions: u64,
}

fn simulate_run<M: CostModel>(
    run_index: usize,
    proto: &dyn Scheduler,
    probs: &[f64],
    config: &SimConfig,
    model: &M,
) -> Result<RunTally> {
    let n = probs.len();
    let mut scheduler = proto.fork();
    let mut channel = stream_rng(config.seed, run_index, Stream::Channel);
    let mut policy_rng = stream_rng(config.seed, run_index, Stream::Policy);
    let mut noise = stream_rng(config.seed, run_index, Stream::Noise);
    let mut state = model.init(&mut noise);

    let counted = config.horizon - config.warmup;
    let mut tally = RunTally {
        j: None,
        batch_means: Vec::new(),
        attempts: vec![0; n],
        successes: vec![0; n],
        histogram: vec![0; n * HISTOGRAM_BINS],
        decide_ns: 0,
        decisions: 0,
    };
    let mut batch_sums = [0.0; BATCHES];
    let mut batch_counts = [0usize; BATCHES];
    let mut deltas = vec![1u32; n];
    let mut scheduled = Vec::with_capacity(config.channels);
    let mut total = 0.0;

    for t in 0..config.horizon {
        let start = Instant::now();
        scheduler.decide_into(&deltas, &mut policy_rng, &mut scheduled)?;
        tally.decide_ns += start.elapsed().as_nanos();
        tally.decisions += 1;
        if scheduled.len() > config.channels {
            return Err(Error::Domain(format!(
                "policy scheduled {} sensors on {} channels",
                scheduled.len(),
                config.channels
            )));
        }

        let counting = t >= config.warmup;
        let mut next = scheduled.iter().copied().peekable();
        let mut step_cost = 0.0;
        for i in 0..n {
            // Every sensor consumes one draw per step so that channel
            // outcomes line up across policies.
            let u: f64 = channel.random();
            let attempt = next.next_if_eq(&i).is_some();
            let delivered = attempt && u < probs[i];
            deltas[i] = if delivered { 1 } else { deltas[i].saturating_add(1) };
            step_cost += model.step(&mut state, i, delivered, deltas[i], &mut noise);
            if counting {
                tally.attempts[i] += attempt as u64;
                tally.successes[i] += delivered as u64;
                let bin = (deltas[i] as usize).min(HISTOGRAM_BINS) - 1;
                tally.histogram[i * HISTOGRAM_BINS + bin] += 1;
            }
        }
        if !(step_cost <= DIVERGENCE_LIMIT) {
            return Ok(tally);
        }
        if counting {
            total += step_cost;
            let b = (t - config.warmup) * BATCHES / counted;
            batch_sums[b] += step_cost;
            batch_counts[b] += 1;
        }
    }
    tally.j = Some(total / counted as f64);
    tally.batch_means =
        batch_sums.iter().zip(&batch_counts).filter(|(_, &c)| c > 0).map(|(s, &c)| s / c as f64).collect();
    Ok(tally)
}

fn mean_and_ci(values: &[f64], quantile: f64) -> (f64, f64) {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, quantile * (var / k).sqrt())
}

fn run<M: CostModel>(sensors: &[SensorModel], config: &SimConfig, metric: Metric, model: &M) -> Result<SimReport> {
    let n = sensors.len();
    config.validate(n)?;
    let shared: Arc<[SensorModel]> = sensors.to_vec().into();
    let proto = config.policy.build(&shared, config.channels)?;
    let probs: Vec<f64> = sensors.iter().map(SensorModel::p).collect();
    let mut unstable_sensors = Vec::new();
    for (i, s) in sensors.iter().enumerate() {
        if !necessary_stability(&s.plant)? {
            unstable_sensors.push(i);
        }
    }

    let mut run_j = Vec::with_capacity(config.runs);
    let mut single_run_batches = Vec::new();
    let mut attempts = vec![0u64; n];
    let mut successes = vec![0u64; n];
    let mut histogram = vec![0u64; n * HISTOGRAM_BINS];
    let (mut decide_ns, mut decisions) = (0u128, 0u64);
    let mut diverged_runs = 0;

    // Blocks bound memory; tallies are merged in run order so the report is
    // independent of the thread count.
    for block_start in (0..config.runs).step_by(BLOCK) {
        let block_end = (block_start + BLOCK).min(config.runs);
        let tallies = (block_start..block_end)
            .into_par_iter()
            .map(|r| simulate_run(r, proto.as_ref(), &probs, config, model))
            .collect::<Result<Vec<_>>>()?;
        for tally in tallies {
            decide_ns += tally.decide_ns;
            decisions += tally.decisions;
            let Some(j) = tally.j else {
                diverged_runs += 1;
                continue;
            };
            run_j.push(j);
            single_run_batches = tally.batch_means;
            for i in 0..n {
                attempts[i] += tally.attempts[i];
                successes[i] += tally.successes[i];
            }
            for (h, c) in histogram.iter_mut().zip(&tally.histogram) {
                *h += c;
            }
        }
    }

    let (mean_j, ci95) = match run_j.len() {
        0 => (f64::NAN, f64::NAN),
        1 => (run_j[0], mean_and_ci(&single_run_batches, BATCH_T95).1),
        _ => mean_and_ci(&run_j, 1.96),
    };
    let steps = (run_j.len() * (config.horizon - config.warmup)).max(1) as f64;
    Ok(SimReport {
        policy: config.policy.name().to_string(),
        metric,
        sensors: n,
        channels: config.channels,
        runs: config.runs,
        horizon: config.horizon,
        warmup: config.warmup,
        mean_j,
        ci95,
        per_sensor_attempt_rate: attempts.iter().map(|&a| a as f64 / steps).collect(),
        per_sensor_success_rate: successes.iter().map(|&s| s as f64 / steps).collect(),
        per_sensor_attempts: attempts,
        per_sensor_successes: successes,
        aoi_histogram: histogram.chunks(HISTOGRAM_BINS).map(<[u64]>::to_vec).collect(),
        wall_time_per_decision: decide_ns as f64 * 1e-9 / decisions.max(1) as f64,
        diverged_runs,
        unstable_sensors,
    })
}
