use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::report::EvalReport;
use crate::error::Result;

/// One long-format metric row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CsvRow {
    pub experiment: String,
    pub condition: String,
    pub trial: String,
    pub metric: String,
    pub value: f64,
}

impl CsvRow {
    pub fn new(experiment: &str, condition: &str, trial: impl ToString, metric: &str, value: f64) -> Self {
        Self {
            experiment: experiment.into(),
            condition: condition.into(),
            trial: trial.to_string(),
            metric: metric.into(),
            value,
        }
    }
}

impl EvalReport {
    /// Per-trial accuracies, their mean and spread, and pooled per-SNR accuracy.
    pub fn csv_rows(&self, experiment: &str, condition: &str) -> Vec<CsvRow> {
        let mut rows: Vec<CsvRow> = self
            .per_trial
            .iter()
            .enumerate()
            .map(|(i, &a)| CsvRow::new(experiment, condition, i, "accuracy", a))
            .collect();
        rows.push(CsvRow::new(experiment, condition, "all", "accuracy_mean", self.mean_accuracy));
        rows.push(CsvRow::new(experiment, condition, "all", "accuracy_std", self.std_accuracy));
        for s in &self.accuracy_by_snr {
            let cond = format!("{condition};snr={}", s.snr_db);
            rows.push(CsvRow::new(experiment, &cond, "all", "accuracy", s.accuracy));
        }
        rows
    }
}

pub fn write_csv(path: impl AsRef<Path>, rows: &[CsvRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Hex SHA-256 of `bytes`.
pub fn config_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
