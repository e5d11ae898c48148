//! Per-decision wall-time measurement of scheduling policies.

use std::sync::Arc;
use std::time::{Duration, Instant};

use aoi_sched::plant::SensorModel;
use aoi_sched::sched::PolicySpec;
use aoi_sched::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingOptions {
    /// `M = max(1, N / ratio)`.
    pub n_over_m: usize,
    /// Stop after this many decisions per (policy, N).
    pub max_decisions: usize,
    /// Stop once this much time has been spent on a (policy, N) cell.
    pub budget: Duration,
    pub seed: u64,
    /// AoI values of the synthetic inputs are drawn from `1..=max_age`.
    pub max_age: u32,
}

impl Default for TimingOptions {
    fn default() -> Self {
        Self { n_over_m: 2, max_decisions: 10_000, budget: Duration::from_secs(2), seed: 0, max_age: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub policy: String,
    pub n: usize,
    pub m: usize,
    /// Median over batches of the mean time per decision.
    pub ns_per_decision: f64,
    pub decisions: usize,
}

/// Times each policy on the first `N` sensors of the pool for every `N` in
/// `n_list`. Decisions are grouped into batches of at least a millisecond and
/// the median batch is reported.
pub fn measure_decision_time(
    pool: &[SensorModel],
    policies: &[PolicySpec],
    n_list: &[usize],
    opts: &TimingOptions,
) -> Result<Vec<TimingRow>> {
    if opts.n_over_m == 0 || opts.max_decisions == 0 || opts.max_age == 0 {
        return Err(Error::Domain("timing options must be positive".into()));
    }
    let mut rows = Vec::new();
    for &n in n_list {
        if n == 0 || n > pool.len() {
            return Err(Error::Domain(format!("N = {n} needs 1..={} sensors", pool.len())));
        }
        let m = (n / opts.n_over_m).max(1);
        let sensors: Arc<[SensorModel]> = pool[..n].to_vec().into();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let inputs: Vec<Vec<u32>> =
            (0..256).map(|_| (0..n).map(|_| rng.random_range(1..=opts.max_age)).collect()).collect();
        for spec in policies {
            let mut policy = spec.build(&sensors, m)?;
            let mut out = Vec::with_capacity(m);
            let mut batch_means = Vec::new();
            let mut decisions = 0;
            let mut batch = 1;
            let started = Instant::now();
            while decisions < opts.max_decisions && started.elapsed() < opts.budget {
                let size = batch.min(opts.max_decisions - decisions);
                let t0 = Instant::now();
                for k in 0..size {
                    policy.decide_into(&inputs[(decisions + k) % inputs.len()], &mut rng, &mut out)?;
                }
                let elapsed = t0.elapsed();
                decisions += size;
                batch_means.push(elapsed.as_nanos() as f64 / size as f64);
                if elapsed < Duration::from_millis(1) {
                    batch *= 2;
                }
            }
            batch_means.sort_by(f64::total_cmp);
            rows.push(TimingRow {
                policy: spec.name().to_string(),
                n,
                m,
                ns_per_decision: batch_means[batch_means.len() / 2],
                decisions,
            });
        }
    }
    Ok(rows)
}
