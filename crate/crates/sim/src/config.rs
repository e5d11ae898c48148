use std::fmt;
use std::str::FromStr;

use aoi_sched::sched::PolicySpec;
use aoi_sched::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Per-step cost accumulated by the simulator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// `beta * alpha^delta` summed over sensors.
    AoiFunctionCost,
    /// `Tr(P(delta))` summed over sensors.
    TraceOfP,
    /// `||x - x_hat||^2` from simulated trajectories.
    EmpiricalSquaredError,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::AoiFunctionCost => "aoi",
            Metric::TraceOfP => "trace",
            Metric::EmpiricalSquaredError => "empirical",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "aoi" | "aoi-function" | "aoi-function-cost" => Ok(Metric::AoiFunctionCost),
            "trace" | "trace-of-p" => Ok(Metric::TraceOfP),
            "empirical" | "mse" | "empirical-squared-error" => Ok(Metric::EmpiricalSquaredError),
            other => Err(Error::Domain(format!("unknown metric '{other}', expected aoi, trace or empirical"))),
        }
    }
}

/// One Monte Carlo experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Steps per run.
    pub horizon: usize,
    pub runs: usize,
    pub seed: u64,
    pub policy: PolicySpec,
    /// Channel count `M`.
    pub channels: usize,
    pub metric: Metric,
    /// Leading steps of each run left out of the average.
    pub warmup: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            horizon: 1000,
            runs: 10_000,
            seed: 0,
            policy: PolicySpec::Lightweight,
            channels: 1,
            metric: Metric::TraceOfP,
            warmup: 100,
        }
    }
}

impl SimConfig {
    pub fn new(policy: PolicySpec, channels: usize) -> Self {
        Self { policy, channels, ..Self::default() }
    }

    /// Sets the horizon and a warmup of 10% of it.
    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self.warmup = horizon / 10;
        self
    }

    pub fn with_runs(mut self, runs: usize) -> Self {
        self.runs = runs;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_metric(mut self, metric: Metric) -> Self {
        self.metric = metric;
        self
    }

    pub fn validate(&self, sensors: usize) -> Result<()> {
        if self.horizon == 0 || self.runs == 0 {
            return Err(Error::Domain("horizon and runs must be at least 1".into()));
        }
        if self.warmup >= self.horizon {
            return Err(Error::Domain(format!("warmup {} must be below the horizon {}", self.warmup, self.horizon)));
        }
        if sensors == 0 {
            return Err(Error::Domain("need at least one sensor".into()));
        }
        if self.channels == 0 || self.channels > sensors {
            return Err(Error::Domain(format!("channel count {} not in 1..={sensors}", self.channels)));
        }
        Ok(())
    }
}

/// Independent random streams of one run.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Stream {
    Channel = 0,
    Policy = 1,
    Noise = 2,
}

/// Generator for `(seed, run, purpose)`. Streams never overlap, so results do
/// not depend on how runs are spread over threads.
pub(crate) fn stream_rng(seed: u64, run: usize, purpose: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run as u64 * 4 + purpose as u64);
    rng
}
