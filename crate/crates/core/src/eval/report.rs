use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counts from one evaluation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Tally {
    pub confusion: Vec<Vec<u64>>,
    /// SNR bits -> (correct, total).
    pub by_snr: BTreeMap<u64, (u64, u64)>,
}

impl Tally {
    pub fn new(classes: usize) -> Self {
        Self {
            confusion: vec![vec![0; classes]; classes],
            by_snr: BTreeMap::new(),
        }
    }

    pub fn record(&mut self, truth: usize, predicted: usize, snr_db: f64) {
        self.confusion[truth][predicted] += 1;
        let e = self.by_snr.entry(snr_db.to_bits()).or_default();
        e.0 += u64::from(truth == predicted);
        e.1 += 1;
    }

    pub fn from_predictions(classes: usize, truth: &[usize], predicted: &[usize], snrs: &[f64]) -> Result<Self> {
        if truth.len() != predicted.len() || truth.len() != snrs.len() {
            return Err(Error::shape("predictions, labels and SNRs disagree in length"));
        }
        let mut t = Self::new(classes);
        for ((&y, &p), &s) in truth.iter().zip(predicted).zip(snrs) {
            if y >= classes || p >= classes {
                return Err(Error::invalid(format!("class index out of range for {classes} classes")));
            }
            t.record(y, p, s);
        }
        Ok(t)
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.correct() as f64 / self.total().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrAccuracy {
    pub snr_db: f64,
    pub accuracy: f64,
    pub count: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub variant: String,
    pub t: usize,
    pub extraction_mode: String,
    pub n_per_type_per_snr: Option<usize>,
    pub seed: u64,
    pub trial_seeds: Vec<u64>,
    pub config_hash: String,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    /// Correct over total, pooled across trials.
    pub accuracy: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub per_trial: Vec<f64>,
    pub accuracy_by_snr: Vec<SnrAccuracy>,
    /// Rows are true classes, columns predictions, summed over trials.
    pub confusion: Vec<Vec<u64>>,
    pub metadata: ReportMeta,
}

impl EvalReport {
    pub fn from_trials(class_names: &[String], trials: &[Tally], metadata: ReportMeta) -> Result<Self> {
        if trials.is_empty() {
            return Err(Error::invalid("report needs at least one trial"));
        }
        let classes = class_names.len();
        let mut confusion = vec![vec![0u64; classes]; classes];
        let mut by_snr: BTreeMap<u64, (u64, u64)> = BTreeMap::new();
        for t in trials {
            for (row, trow) in confusion.iter_mut().zip(&t.confusion) {
                row.iter_mut().zip(trow).for_each(|(a, &b)| *a += b);
            }
            for (&k, &(c, n)) in &t.by_snr {
                let e = by_snr.entry(k).or_default();
                e.0 += c;
                e.1 += n;
            }
        }
        let per_trial: Vec<f64> = trials.iter().map(Tally::accuracy).collect();
        let (mean_accuracy, std_accuracy) = mean_std(&per_trial);
        let total: u64 = confusion.iter().flatten().sum();
        let correct: u64 = (0..classes).map(|i| confusion[i][i]).sum();
        let mut accuracy_by_snr: Vec<SnrAccuracy> = by_snr
            .into_iter()
            .map(|(k, (c, n))| SnrAccuracy {
                snr_db: f64::from_bits(k),
                accuracy: c as f64 / n.max(1) as f64,
                count: n,
            })
            .collect();
        accuracy_by_snr.sort_by(|a, b| a.snr_db.total_cmp(&b.snr_db));
        Ok(Self {
            class_names: class_names.to_vec(),
            accuracy: correct as f64 / total.max(1) as f64,
            mean_accuracy,
            std_accuracy,
            per_trial,
            accuracy_by_snr,
            confusion,
            metadata,
        })
    }
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("C{i}")).collect()
    }

    #[test]
    fn perfect_classifier() {
        let truth: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let snrs = vec![18.0; 40];
        let t = Tally::from_predictions(4, &truth, &truth, &snrs).unwrap();
        let r = EvalReport::from_trials(&names(4), &[t], ReportMeta::default()).unwrap();
        assert_eq!(r.accuracy, 1.0);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(r.confusion[i][j], if i == j { 10 } else { 0 });
            }
        }
    }

    #[test]
    fn aggregation_identities() {
        let truth = vec![0, 0, 1, 1, 1, 2];
        let a = Tally::from_predictions(3, &truth, &[0, 1, 1, 1, 2, 2], &[0.0, 0.0, 0.0, 5.0, 5.0, 5.0]).unwrap();
        let b = Tally::from_predictions(3, &truth, &[0, 0, 0, 0, 0, 0], &[0.0; 6]).unwrap();
        let r = EvalReport::from_trials(&names(3), &[a.clone(), b.clone()], ReportMeta::default()).unwrap();
        assert_eq!(r.per_trial, vec![4.0 / 6.0, 2.0 / 6.0]);
        assert!((r.mean_accuracy - 0.5).abs() < 1e-15);
        let row_sums: Vec<u64> = r.confusion.iter().map(|row| row.iter().sum()).collect();
        assert_eq!(row_sums, vec![4, 6, 2]);
        assert_eq!(r.accuracy_by_snr.len(), 2);
        let total: u64 = r.accuracy_by_snr.iter().map(|s| s.count).sum();
        assert_eq!(total, 12);
        assert!(Tally::from_predictions(3, &[0], &[3], &[0.0]).is_err());
        assert!(EvalReport::from_trials(&names(3), &[], ReportMeta::default()).is_err());
    }
}
