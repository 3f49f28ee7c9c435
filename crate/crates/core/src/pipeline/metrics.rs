//! Classification metrics derived from a confusion matrix.

use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::artifact::PipelineArtifact;
use super::dataset::Dataset;
use super::PipelineError;
use crate::models::LabelSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_f1: f64,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<u64>>,
    pub n_samples: u64,
    pub training_time_s: f64,
    pub mean_prediction_latency_s: f64,
    pub evaluated_at: DateTime<Utc>,
}

impl EvalMetrics {
    /// Metrics for a square confusion matrix. Per-class F1 is 0 whenever
    /// precision + recall is 0. Macro-F1 averages over the classes that
    /// occur either as truth or as prediction.
    pub fn from_confusion(confusion: Vec<Vec<u64>>, labels: &LabelSet) -> Self {
        let k = confusion.len();
        let total: u64 = confusion.iter().flatten().sum();
        let trace: u64 = (0..k).map(|i| confusion[i][i]).sum();
        let mut per_class = Vec::with_capacity(k);
        let mut f1_sum = 0.0;
        let mut active = 0usize;
        for c in 0..k {
            let tp = confusion[c][c] as f64;
            let support: u64 = confusion[c].iter().sum();
            let predicted: u64 = (0..k).map(|r| confusion[r][c]).sum();
            let precision = if predicted > 0 {
                tp / predicted as f64
            } else {
                0.0
            };
            let recall = if support > 0 {
                tp / support as f64
            } else {
                0.0
            };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            if support > 0 || predicted > 0 {
                f1_sum += f1;
                active += 1;
            }
            per_class.push(ClassMetrics {
                label: labels.name(c).to_owned(),
                precision,
                recall,
                f1,
                support,
            });
        }
        Self {
            accuracy: if total > 0 {
                trace as f64 / total as f64
            } else {
                0.0
            },
            per_class,
            macro_f1: if active > 0 {
                f1_sum / active as f64
            } else {
                0.0
            },
            confusion,
            n_samples: total,
            training_time_s: 0.0,
            mean_prediction_latency_s: 0.0,
            evaluated_at: Utc::now(),
        }
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], labels: &LabelSet) -> Self {
        let k = labels.len();
        let mut confusion = vec![vec![0u64; k]; k];
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion[t][p] += 1;
        }
        Self::from_confusion(confusion, labels)
    }

    pub fn with_training_time(mut self, d: Duration) -> Self {
        self.training_time_s = d.as_secs_f64();
        self
    }
}

/// Which metric grid search maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    #[default]
    MacroF1,
    Accuracy,
}

impl Scoring {
    pub fn score(&self, m: &EvalMetrics) -> f64 {
        match self {
            Scoring::MacroF1 => m.macro_f1,
            Scoring::Accuracy => m.accuracy,
        }
    }
}

/// Runs every test example through the full tokenize, vectorize, predict
/// path of `artifact`.
pub fn evaluate(artifact: &PipelineArtifact, test: &Dataset) -> Result<EvalMetrics, PipelineError> {
    let labels = &artifact.labels;
    let mut truth = Vec::with_capacity(test.len());
    for e in test.examples() {
        truth.push(
            labels
                .index_of(&e.label)
                .ok_or_else(|| PipelineError::LabelMismatch(e.label.clone()))?,
        );
    }
    let mut predicted = Vec::with_capacity(test.len());
    let mut latency = Duration::ZERO;
    for e in test.examples() {
        let start = Instant::now();
        let p = artifact.classify(&e.log)?;
        latency += start.elapsed();
        predicted.push(p.class_id);
    }
    let mut m = EvalMetrics::from_predictions(&truth, &predicted, labels);
    if !test.is_empty() {
        m.mean_prediction_latency_s = latency.as_secs_f64() / test.len() as f64;
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two() -> LabelSet {
        LabelSet::new(["a", "b"]).unwrap()
    }

    #[test]
    fn metric_arithmetic() {
        let m = EvalMetrics::from_confusion(vec![vec![2, 0], vec![1, 1]], &two());
        assert_eq!(m.accuracy, 0.75);
        assert!((m.per_class[0].precision - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.per_class[0].recall, 1.0);
        assert!((m.per_class[1].f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.per_class[0].support, 2);
        assert_eq!(m.per_class[1].support, 2);
    }

    #[test]
    fn perfect_classifier() {
        let m = EvalMetrics::from_predictions(&[0, 1, 1, 0], &[0, 1, 1, 0], &two());
        assert_eq!(m.confusion, vec![vec![2, 0], vec![0, 2]]);
        assert_eq!(m.accuracy, 1.0);
        assert!(m.per_class.iter().all(|c| c.f1 == 1.0));
        assert_eq!(m.macro_f1, 1.0);
    }

    #[test]
    fn constant_classifier() {
        let m = EvalMetrics::from_predictions(&[0, 0, 1, 1], &[0, 0, 0, 0], &two());
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.per_class[1].f1, 0.0);
        assert_eq!(m.per_class[1].precision, 0.0);
    }

    #[test]
    fn consistency_invariants() {
        let truth = [0, 1, 2, 2, 1, 0, 0, 2];
        let pred = [0, 2, 2, 1, 1, 0, 1, 2];
        let labels = LabelSet::new(["x", "y", "z"]).unwrap();
        let m = EvalMetrics::from_predictions(&truth, &pred, &labels);
        let diag: u64 = (0..3).map(|i| m.confusion[i][i]).sum();
        assert_eq!(m.accuracy, diag as f64 / 8.0);
        for (c, row) in m.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<u64>(), m.per_class[c].support);
        }
    }
}
