//! Parameter sweeps over ensemble size, heterogeneity and channel quality.

use std::fmt;
use std::str::FromStr;

use aoi_sched::plant::{PlantModel, SensorModel};
use aoi_sched::sched::PolicySpec;
use aoi_sched::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::SimConfig;
use crate::engine::{simulate, SimReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    /// Sweep value is `N`; the first `N` pool plants are used and `N / M`
    /// stays at the base ratio.
    Scale,
    /// Sweep value is the fraction of sensors with their own plant; the rest
    /// reuse earlier ones. Zero means every sensor shares plant 0.
    Heterogeneity,
    /// Sweep value is a success probability shared by every sensor.
    Channel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub kind: SweepKind,
    pub values: Vec<f64>,
}

impl Sweep {
    /// `count` evenly spaced values from `lo` to `hi` inclusive.
    pub fn linspace(kind: SweepKind, lo: f64, hi: f64, count: usize) -> Result<Self> {
        if count == 0 || !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::Domain("sweep needs finite bounds and at least one point".into()));
        }
        let values = if count == 1 {
            vec![lo]
        } else {
            (0..count).map(|k| lo + (hi - lo) * k as f64 / (count - 1) as f64).collect()
        };
        Ok(Self { kind, values })
    }
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepKind::Scale => "scale",
            SweepKind::Heterogeneity => "heterogeneity",
            SweepKind::Channel => "channel",
        })
    }
}

impl FromStr for Sweep {
    type Err = Error;

    /// `kind:lo:hi:count`, for example `channel:0.8:1.0:5`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        let [kind, lo, hi, count] = parts[..] else {
            return Err(Error::Domain(format!("sweep '{s}' is not kind:lo:hi:count")));
        };
        let kind = match kind {
            "scale" => SweepKind::Scale,
            "heterogeneity" => SweepKind::Heterogeneity,
            "channel" => SweepKind::Channel,
            other => return Err(Error::Domain(format!("unknown sweep kind '{other}'"))),
        };
        let num = |t: &str| t.parse::<f64>().map_err(|e| Error::Domain(format!("bad sweep bound '{t}': {e}")));
        let count = count.parse::<usize>().map_err(|e| Error::Domain(format!("bad sweep count '{count}': {e}")))?;
        Sweep::linspace(kind, num(lo)?, num(hi)?, count)
    }
}

/// One (sweep point, policy) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Absent for a plain simulation.
    pub sweep_value: Option<f64>,
    pub policy: String,
    pub report: SimReport,
}

/// Plants and channel count of one sweep point.
pub fn sweep_point(
    pool: &[PlantModel],
    channels: usize,
    kind: SweepKind,
    value: f64,
) -> Result<(Vec<PlantModel>, usize)> {
    if pool.is_empty() {
        return Err(Error::Domain("empty plant pool".into()));
    }
    match kind {
        SweepKind::Scale => {
            let n = value.round();
            if !(n >= 1.0 && n as usize <= pool.len()) {
                return Err(Error::Domain(format!("sweep size {value} needs 1..={} plants", pool.len())));
            }
            let n = n as usize;
            let ratio = pool.len() as f64 / channels as f64;
            let m = ((n as f64 / ratio).round() as usize).clamp(1, n);
            Ok((pool[..n].to_vec(), m))
        }
        SweepKind::Heterogeneity => {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::Domain(format!("heterogeneity {value} not in [0, 1]")));
            }
            let distinct = ((value * pool.len() as f64).round() as usize).max(1);
            Ok(((0..pool.len()).map(|i| pool[i % distinct].clone()).collect(), channels))
        }
        SweepKind::Channel => Ok((pool.iter().map(|p| p.with_p(value)).collect::<Result<_>>()?, channels)),
    }
}

/// Simulates every policy at every sweep point. All points reuse the base
/// seed, so neighbouring points share channel randomness.
pub fn run_sweep(
    pool: &[PlantModel],
    policies: &[PolicySpec],
    base: &SimConfig,
    sweep: &Sweep,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(sweep.values.len() * policies.len());
    for &value in &sweep.values {
        let (plants, channels) = sweep_point(pool, base.channels, sweep.kind, value)?;
        let sensors = plants.into_iter().map(SensorModel::new).collect::<Result<Vec<_>>>()?;
        for policy in policies {
            let config = SimConfig { policy: policy.clone(), channels, ..base.clone() };
            let report = simulate(&sensors, &config)?;
            rows.push(SweepRow { sweep_value: Some(value), policy: policy.name().to_string(), report });
        }
    }
    Ok(rows)
}
