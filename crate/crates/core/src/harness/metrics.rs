use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;

/// Flat metric table of one run. Names are dotted, e.g. `jct_s` or
/// `rx.digest_mismatches`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub workload: String,
    pub seed: u64,
    pub loss_rate: f64,
    pub metrics: BTreeMap<String, f64>,
}

/// CSV columns, one row per (scenario, seed, metric).
pub const CSV_HEADER: [&str; 5] = ["scenario", "seed", "loss_rate", "metric", "value"];

impl MetricsReport {
    pub fn new(scenario: &str, workload: &str, seed: u64, loss_rate: f64) -> Self {
        Self {
            scenario: scenario.to_string(),
            workload: workload.to_string(),
            seed,
            loss_rate,
            metrics: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

pub fn write_csv<W: Write>(w: W, reports: &[MetricsReport]) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| HarnessError::Output(e.to_string());
    out.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in reports {
        for (name, value) in &r.metrics {
            out.write_record([
                r.scenario.as_str(),
                &r.seed.to_string(),
                &r.loss_rate.to_string(),
                name,
                &value.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn csv_string(reports: &[MetricsReport]) -> Result<String, HarnessError> {
    let mut buf = Vec::new();
    write_csv(&mut buf, reports)?;
    String::from_utf8(buf).map_err(|e| HarnessError::Output(e.to_string()))
}

/// Writes `<stem>.csv` and `<stem>.json` into `dir`.
pub fn write_reports(dir: &Path, stem: &str, reports: &[MetricsReport]) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    write_csv(std::fs::File::create(dir.join(format!("{stem}.csv")))?, reports)?;
    let json = serde_json::to_string_pretty(reports).map_err(|e| HarnessError::Output(e.to_string()))?;
    std::fs::write(dir.join(format!("{stem}.json")), json)?;
    Ok(())
}

/// Mean of `metric` over the reports with loss rate `rate`.
pub fn mean_at(reports: &[MetricsReport], rate: f64, metric: &str) -> Option<f64> {
    let v: Vec<f64> = reports
        .iter()
        .filter(|r| r.loss_rate == rate)
        .filter_map(|r| r.get(metric))
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
