//! Scheduling policies behind one decision interface.
//!
//! Every policy sees the current AoI vector and returns the sensors to
//! schedule this step. Index policies pick the `M` largest scores, with ties
//! going to the lowest sensor index.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, RwLock};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::bounds::optimize_randomized_q;
use crate::error::{Error, Result};
use crate::index::AoiFunction;
use crate::mdp::{dp_optimal_policy, DpProblem, DpSolution, SingleSensorRvi, DEFAULT_STATE_BUDGET};
use crate::plant::SensorModel;

/// Per-sensor scheduler input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorState {
    pub delta: u32,
    /// `Tr(P(delta))`, filled in for value-of-information policies.
    pub err_trace: Option<f64>,
}

impl SensorState {
    pub fn new(delta: u32) -> Self {
        Self { delta, err_trace: None }
    }
}

/// Sensors scheduled in one step, in increasing index order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub scheduled: Vec<usize>,
}

impl Decision {
    pub fn contains(&self, i: usize) -> bool {
        self.scheduled.binary_search(&i).is_ok()
    }
}

fn check_budget(n: usize, m: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Domain("need at least one sensor".into()));
    }
    if m == 0 || m > n {
        return Err(Error::Domain(format!("channel count {m} not in 1..={n}")));
    }
    Ok(())
}

/// Writes the `m` highest-scoring indices into `out`, sorted ascending.
/// Equal scores prefer the lower index.
pub fn top_m_by_score(scores: &[f64], m: usize, order: &mut Vec<usize>, out: &mut Vec<usize>) {
    order.clear();
    order.extend(0..scores.len());
    let m = m.min(scores.len());
    let by_score = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if m < scores.len() && m > 0 {
        order.select_nth_unstable_by(m - 1, by_score);
    }
    out.clear();
    out.extend_from_slice(&order[..m]);
    out.sort_unstable();
}

fn top_m(scores: &[f64], m: usize) -> Decision {
    let mut order = Vec::with_capacity(scores.len());
    let mut out = Vec::with_capacity(m);
    top_m_by_score(scores, m, &mut order, &mut out);
    Decision { scheduled: out }
}

/// Score of the linear-AoI Whittle baseline: `p d (d + 2/p - 1) / 2`.
pub fn linear_aoi_index(p: f64, delta: u32) -> f64 {
    let d = delta as f64;
    p * d * (d + 2.0 / p - 1.0) / 2.0
}

/// Expected one-step trace reduction from scheduling a sensor.
pub fn voi_greedy_score(sensor: &SensorModel, delta: u32) -> f64 {
    sensor.p() * (sensor.trace_at(delta.saturating_add(1)) - sensor.trace_at(1))
}

pub fn lightweight_schedule(states: &[SensorState], fns: &[AoiFunction], m: usize) -> Result<Decision> {
    check_budget(states.len(), m)?;
    if fns.len() != states.len() {
        return Err(Error::Dimension("one AoI function per sensor required".into()));
    }
    let scores = states.iter().zip(fns).map(|(s, f)| f.whittle_index(s.delta)).collect::<Result<Vec<_>>>()?;
    Ok(top_m(&scores, m))
}

pub fn aoi_greedy_schedule(states: &[SensorState], m: usize) -> Result<Decision> {
    check_budget(states.len(), m)?;
    let scores: Vec<f64> = states.iter().map(|s| s.delta as f64).collect();
    Ok(top_m(&scores, m))
}

pub fn voi_greedy_schedule(states: &[SensorState], sensors: &[SensorModel], m: usize) -> Result<Decision> {
    check_budget(states.len(), m)?;
    if sensors.len() != states.len() {
        return Err(Error::Dimension("one sensor model per state required".into()));
    }
    let scores: Vec<f64> = states.iter().zip(sensors).map(|(s, sm)| voi_greedy_score(sm, s.delta)).collect();
    Ok(top_m(&scores, m))
}

pub fn aoi_whittle_schedule(states: &[SensorState], probs: &[f64], m: usize) -> Result<Decision> {
    check_budget(states.len(), m)?;
    if probs.len() != states.len() {
        return Err(Error::Dimension("one success probability per sensor required".into()));
    }
    let scores: Vec<f64> = states.iter().zip(probs).map(|(s, &p)| linear_aoi_index(p, s.delta)).collect();
    Ok(top_m(&scores, m))
}

pub fn voi_whittle_schedule(
    states: &[SensorState],
    sensors: &[SensorModel],
    m: usize,
    cache: &VoiIndexCache,
) -> Result<Decision> {
    check_budget(states.len(), m)?;
    let scores =
        states.iter().enumerate().map(|(i, s)| cache.index(sensors, i, s.delta)).collect::<Result<Vec<_>>>()?;
    Ok(top_m(&scores, m))
}

/// Samples a subset whose inclusion probabilities are exactly `q` by
/// systematic sampling: one uniform offset `u`, and sensor `i` is picked when
/// some `u + k` falls in its slice of the cumulative sum. Each slice is at
/// most one wide, so no sensor is picked twice and at most `ceil(sum q)`
/// sensors are picked.
pub fn randomized_stationary_schedule<R: Rng + ?Sized>(q: &[f64], m: usize, rng: &mut R) -> Result<Decision> {
    validate_marginals(q, m)?;
    let mut out = Vec::new();
    systematic_sample(q, rng.random::<f64>(), &mut out);
    Ok(Decision { scheduled: out })
}

fn validate_marginals(q: &[f64], m: usize) -> Result<()> {
    if q.is_empty() {
        return Err(Error::Domain("need at least one sensor".into()));
    }
    if q.iter().any(|&x| !(x > 0.0 && x <= 1.0)) {
        return Err(Error::Infeasible("every marginal must lie in (0, 1]".into()));
    }
    let total: f64 = q.iter().sum();
    if total > m as f64 + 1e-9 {
        return Err(Error::Infeasible(format!("marginals sum to {total} which exceeds M = {m}")));
    }
    Ok(())
}

fn systematic_sample(q: &[f64], u: f64, out: &mut Vec<usize>) {
    out.clear();
    let mut lo = 0.0;
    let mut point = u;
    for (i, &qi) in q.iter().enumerate() {
        let hi = lo + qi;
        if point < hi {
            out.push(i);
            point += 1.0;
        }
        lo = hi;
    }
}

/// Next `m` sensors in cyclic order starting at `cursor`; returns the
/// decision and the advanced cursor.
pub fn round_robin_schedule(cursor: usize, n: usize, m: usize) -> Result<(Decision, usize)> {
    check_budget(n, m)?;
    let mut scheduled: Vec<usize> = (0..m).map(|k| (cursor + k) % n).collect();
    scheduled.sort_unstable();
    Ok((Decision { scheduled }, (cursor + m) % n))
}

/// Memoized numeric Whittle indexes for error-trace costs, keyed by
/// `(sensor, delta)`. Concurrent reads are safe; writes are serialized.
#[derive(Debug)]
pub struct VoiIndexCache {
    /// AoI values above this are extrapolated by the last index ratio.
    pub delta_cap: u32,
    /// Truncation of the per-sensor AoI chain used by the oracle.
    pub chain_len: u32,
    cached: bool,
    map: RwLock<HashMap<(usize, u32), f64>>,
}

impl VoiIndexCache {
    pub fn new(delta_cap: u32, chain_len: u32, cached: bool) -> Result<Self> {
        if delta_cap < 2 || chain_len <= delta_cap {
            return Err(Error::Domain(format!("need 2 <= delta_cap ({delta_cap}) < chain length ({chain_len})")));
        }
        Ok(Self { delta_cap, chain_len, cached, map: RwLock::new(HashMap::new()) })
    }

    fn compute(&self, sensor: &SensorModel, delta: u32) -> Result<f64> {
        let costs: Vec<f64> = (1..=self.chain_len).map(|d| sensor.trace_at(d)).collect();
        let hint = sensor.aoi_function().whittle_index(delta).unwrap_or(1.0);
        SingleSensorRvi::new(costs, sensor.p())?.whittle_index(delta, hint)
    }

    fn lookup(&self, sensors: &[SensorModel], i: usize, delta: u32) -> Result<f64> {
        if !self.cached {
            return self.compute(&sensors[i], delta);
        }
        if let Some(&v) = self.map.read().expect("index cache poisoned").get(&(i, delta)) {
            return Ok(v);
        }
        let v = self.compute(&sensors[i], delta)?;
        self.map.write().expect("index cache poisoned").insert((i, delta), v);
        Ok(v)
    }

    /// Index of sensor `i` at AoI `delta`.
    pub fn index(&self, sensors: &[SensorModel], i: usize, delta: u32) -> Result<f64> {
        let delta = delta.max(1);
        if delta <= self.delta_cap {
            return self.lookup(sensors, i, delta);
        }
        let last = self.lookup(sensors, i, self.delta_cap)?;
        let prev = self.lookup(sensors, i, self.delta_cap - 1)?;
        let ratio = if prev > 0.0 && last > prev { last / prev } else { 1.0 + 1e-9 };
        Ok(last * ratio.powf((delta - self.delta_cap) as f64))
    }
}

/// Cost a DP-optimal policy is built for.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DpCost {
    AoiFunction,
    #[default]
    TraceOfP,
}

impl DpCost {
    pub fn costs(&self, sensor: &SensorModel, cap: u32) -> Vec<f64> {
        match self {
            DpCost::AoiFunction => {
                let f = sensor.aoi_function();
                (1..=cap).map(|d| f.value(d)).collect()
            }
            DpCost::TraceOfP => (1..=cap).map(|d| sensor.trace_at(d)).collect(),
        }
    }
}

pub fn dp_problem(sensors: &[SensorModel], m: usize, cap: u32, cost: DpCost) -> DpProblem {
    DpProblem {
        costs: sensors.iter().map(|s| cost.costs(s, cap)).collect(),
        probs: sensors.iter().map(SensorModel::p).collect(),
        m,
        cap,
    }
}

/// Which scheduler to run, with its tuning knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PolicySpec {
    Lightweight,
    AoiGreedy,
    VoiGreedy,
    AoiWhittle,
    VoiWhittle {
        delta_cap: u32,
        chain_len: u32,
        cached: bool,
    },
    RoundRobin,
    /// Marginals default to the optimum of the randomized-policy problem.
    Randomized {
        q: Option<Vec<f64>>,
    },
    Dp {
        delta_cap: u32,
        cost: DpCost,
    },
    /// Sensor `i` requests a slot once its AoI reaches `thresholds[i]`; if
    /// more than `M` request, the largest excess over threshold wins.
    Threshold {
        thresholds: Vec<u32>,
    },
}

impl PolicySpec {
    pub const NAMES: [&'static str; 8] =
        ["lightweight", "aoi-greedy", "voi-greedy", "aoi-whittle", "voi-whittle", "round-robin", "randomized", "dp"];

    pub fn name(&self) -> &'static str {
        match self {
            PolicySpec::Lightweight => "lightweight",
            PolicySpec::AoiGreedy => "aoi-greedy",
            PolicySpec::VoiGreedy => "voi-greedy",
            PolicySpec::AoiWhittle => "aoi-whittle",
            PolicySpec::VoiWhittle { .. } => "voi-whittle",
            PolicySpec::RoundRobin => "round-robin",
            PolicySpec::Randomized { .. } => "randomized",
            PolicySpec::Dp { .. } => "dp",
            PolicySpec::Threshold { .. } => "threshold",
        }
    }

    pub fn voi_whittle_uncached() -> Self {
        PolicySpec::VoiWhittle { delta_cap: 60, chain_len: 200, cached: false }
    }

    /// Instantiates the policy for an ensemble and channel count.
    pub fn build(&self, sensors: &Arc<[SensorModel]>, m: usize) -> Result<Box<dyn Scheduler>> {
        let n = sensors.len();
        check_budget(n, m)?;
        Ok(match self {
            PolicySpec::Lightweight => {
                let fns: Vec<AoiFunction> = sensors.iter().map(SensorModel::aoi_function).collect();
                for f in &fns {
                    f.check_stable()?;
                }
                Box::new(IndexScheduler::new(m, n, Score::Lightweight(fns.into())))
            }
            PolicySpec::AoiGreedy => Box::new(IndexScheduler::new(m, n, Score::Age)),
            PolicySpec::VoiGreedy => Box::new(IndexScheduler::new(m, n, Score::VoiGreedy(sensors.clone()))),
            PolicySpec::AoiWhittle => {
                let probs: Vec<f64> = sensors.iter().map(SensorModel::p).collect();
                Box::new(IndexScheduler::new(m, n, Score::LinearAoi(probs.into())))
            }
            PolicySpec::VoiWhittle { delta_cap, chain_len, cached } => {
                let cache = Arc::new(VoiIndexCache::new(*delta_cap, *chain_len, *cached)?);
                Box::new(IndexScheduler::new(m, n, Score::VoiWhittle(sensors.clone(), cache)))
            }
            PolicySpec::RoundRobin => Box::new(RoundRobin { n, m, cursor: 0 }),
            PolicySpec::Randomized { q } => {
                let q = match q {
                    Some(q) => {
                        if q.len() != n {
                            return Err(Error::Dimension("one marginal per sensor required".into()));
                        }
                        q.clone()
                    }
                    None => {
                        let fns: Vec<AoiFunction> = sensors.iter().map(SensorModel::aoi_function).collect();
                        optimize_randomized_q(&fns, m)?.q
                    }
                };
                validate_marginals(&q, m)?;
                Box::new(Randomized { q: q.into() })
            }
            PolicySpec::Dp { delta_cap, cost } => {
                let problem = dp_problem(sensors, m, *delta_cap, *cost);
                let solution = dp_optimal_policy(&problem, DEFAULT_STATE_BUDGET)?;
                Box::new(DpTable { problem: Arc::new(problem), solution: Arc::new(solution) })
            }
            PolicySpec::Threshold { thresholds } => {
                if thresholds.len() != n {
                    return Err(Error::Dimension("one threshold per sensor required".into()));
                }
                if thresholds.contains(&0) {
                    return Err(Error::Domain("thresholds must be at least 1".into()));
                }
                Box::new(Thresholds { thresholds: thresholds.clone().into(), m, scores: Vec::new(), order: Vec::new() })
            }
        })
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicySpec {
    type Err = Error;

    /// Accepts the names in [`PolicySpec::NAMES`] and `threshold:T1,T2,...`.
    fn from_str(s: &str) -> Result<Self> {
        if let Some(list) = s.trim().strip_prefix("threshold:") {
            let thresholds = list
                .split(',')
                .map(|t| t.trim().parse::<u32>().map_err(|e| Error::Domain(format!("bad threshold '{t}': {e}"))))
                .collect::<Result<Vec<_>>>()?;
            return Ok(PolicySpec::Threshold { thresholds });
        }
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "lightweight" => PolicySpec::Lightweight,
            "aoi-greedy" => PolicySpec::AoiGreedy,
            "voi-greedy" => PolicySpec::VoiGreedy,
            "aoi-whittle" => PolicySpec::AoiWhittle,
            "voi-whittle" => PolicySpec::VoiWhittle { delta_cap: 60, chain_len: 200, cached: true },
            "round-robin" => PolicySpec::RoundRobin,
            "randomized" => PolicySpec::Randomized { q: None },
            "dp" => PolicySpec::Dp { delta_cap: 25, cost: DpCost::TraceOfP },
            other => {
                return Err(Error::Domain(format!(
                    "unknown policy '{other}', expected one of {}",
                    PolicySpec::NAMES.join(", ")
                )))
            }
        })
    }
}

/// A stateful decision maker. One instance serves one simulation run;
/// [`Scheduler::fork`] makes a fresh instance that shares immutable tables
/// and caches.
pub trait Scheduler: Send + Sync {
    /// Writes the sensors to schedule for the AoI vector `deltas` into `out`,
    /// sorted ascending.
    fn decide_into(&mut self, deltas: &[u32], rng: &mut dyn RngCore, out: &mut Vec<usize>) -> Result<()>;

    fn fork(&self) -> Box<dyn Scheduler>;

    fn decide(&mut self, deltas: &[u32], rng: &mut dyn RngCore) -> Result<Decision> {
        let mut out = Vec::new();
        self.decide_into(deltas, rng, &mut out)?;
        Ok(Decision { scheduled: out })
    }
}

#[derive(Clone)]
enum Score {
    Lightweight(Arc<[AoiFunction]>),
    Age,
    VoiGreedy(Arc<[SensorModel]>),
    LinearAoi(Arc<[f64]>),
    VoiWhittle(Arc<[SensorModel]>, Arc<VoiIndexCache>),
}

#[derive(Clone)]
struct IndexScheduler {
    m: usize,
    score: Score,
    scores: Vec<f64>,
    order: Vec<usize>,
}

impl IndexScheduler {
    fn new(m: usize, n: usize, score: Score) -> Self {
        Self { m, score, scores: Vec::with_capacity(n), order: Vec::with_capacity(n) }
    }
}

impl Scheduler for IndexScheduler {
    fn decide_into(&mut self, deltas: &[u32], _rng: &mut dyn RngCore, out: &mut Vec<usize>) -> Result<()> {
        self.scores.clear();
        match &self.score {
            Score::Lightweight(fns) => {
                for (f, &d) in fns.iter().zip(deltas) {
                    self.scores.push(f.whittle_index(d)?);
                }
            }
            Score::Age => self.scores.extend(deltas.iter().map(|&d| d as f64)),
            Score::VoiGreedy(sensors) => {
                self.scores.extend(sensors.iter().zip(deltas).map(|(s, &d)| voi_greedy_score(s, d)))
            }
            Score::LinearAoi(probs) => {
                self.scores.extend(probs.iter().zip(deltas).map(|(&p, &d)| linear_aoi_index(p, d)))
            }
            Score::VoiWhittle(sensors, cache) => {
                for (i, &d) in deltas.iter().enumerate() {
                    self.scores.push(cache.index(sensors, i, d)?);
                }
            }
        }
        top_m_by_score(&self.scores, self.m, &mut self.order, out);
        Ok(())
    }

    fn fork(&self) -> Box<dyn Scheduler> {
        Box::new(self.clone())
    }
}

struct RoundRobin {
    n: usize,
    m: usize,
    cursor: usize,
}

impl Scheduler for RoundRobin {
    fn decide_into(&mut self, _deltas: &[u32], _rng: &mut dyn RngCore, out: &mut Vec<usize>) -> Result<()> {
        out.clear();
        out.extend((0..self.m).map(|k| (self.cursor + k) % self.n));
        out.sort_unstable();
        self.cursor = (self.cursor + self.m) % self.n;
        Ok(())
    }

    fn fork(&self) -> Box<dyn Scheduler> {
        Box::new(RoundRobin { cursor: 0, ..*self })
    }
}

struct Randomized {
    q: Arc<[f64]>,
}

impl Scheduler for Randomized {
    fn decide_into(&mut self, _deltas: &[u32], rng: &mut dyn RngCore, out: &mut Vec<usize>) -> Result<()> {
        systematic_sample(&self.q, rng.random::<f64>(), out);
        Ok(())
    }

    fn fork(&self) -> Box<dyn Scheduler> {
        Box::new(Randomized { q: self.q.clone() })
    }
}

struct Thresholds {
    thresholds: Arc<[u32]>,
    m: usize,
    scores: Vec<f64>,
    order: Vec<usize>,
}

impl Scheduler for Thresholds {
    fn decide_into(&mut self, deltas: &[u32], _rng: &mut dyn RngCore, out: &mut Vec<usize>) -> Result<()> {
        self.scores.clear();
        self.scores.extend(deltas.iter().zip(self.thresholds.iter()).map(|(&d, &t)| d as f64 - t as f64));
        let eligible = self.scores.iter().filter(|&&s| s >= 0.0).count();
        top_m_by_score(&self.scores, self.m.min(eligible), &mut self.order, out);
        Ok(())
    }

    fn fork(&self) -> Box<dyn Scheduler> {
        Box::new(Thresholds { thresholds: self.thresholds.clone(), m: self.m, scores: Vec::new(), order: Vec::new() })
    }
}

struct DpTable {
    problem: Arc<DpProblem>,
    solution: Arc<DpSolution>,
}

impl Scheduler for DpTable {
    fn decide_into(&mut self, deltas: &[u32], _rng: &mut dyn RngCore, out: &mut Vec<usize>) -> Result<()> {
        out.clear();
        out.extend_from_slice(self.solution.action_at(&self.problem, deltas));
        Ok(())
    }

    fn fork(&self) -> Box<dyn Scheduler> {
        Box::new(DpTable { problem: self.problem.clone(), solution: self.solution.clone() })
    }
}
