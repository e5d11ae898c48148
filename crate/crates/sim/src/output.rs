//! CSV tables and their JSON mirror.

use std::io::Write;

use aoi_sched::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::sweep::SweepRow;

pub const SCHEMA_VERSION: u32 = 1;

pub const CSV_COLUMNS: [&str; 6] = ["sweep_value", "policy", "mean_J", "ci95", "time_per_decision_ns", "diverged_runs"];

#[derive(Serialize)]
struct CsvRow<'a> {
    sweep_value: Option<f64>,
    policy: &'a str,
    #[serde(rename = "mean_J")]
    mean_j: f64,
    ci95: f64,
    time_per_decision_ns: f64,
    diverged_runs: usize,
}

/// Writes one CSV row per (sweep point, policy).
pub fn write_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let ser = |e: csv::Error| Error::Serialization(e.to_string());
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_COLUMNS).map_err(ser)?;
    for row in rows {
        w.serialize(CsvRow {
            sweep_value: row.sweep_value,
            policy: &row.policy,
            mean_j: row.report.mean_j,
            ci95: row.report.ci95,
            time_per_decision_ns: row.report.wall_time_per_decision * 1e9,
            diverged_runs: row.report.diverged_runs,
        })
        .map_err(ser)?;
    }
    w.flush().map_err(|e| Error::Serialization(e.to_string()))
}

/// JSON mirror of the CSV table with the full reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsDocument {
    pub schema_version: u32,
    pub rows: Vec<SweepRow>,
}

impl ResultsDocument {
    pub fn new(rows: Vec<SweepRow>) -> Self {
        Self { schema_version: SCHEMA_VERSION, rows }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}
