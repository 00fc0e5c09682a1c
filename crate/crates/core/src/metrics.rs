//! Accuracy, macro-F1 and confusion matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub support: usize,
    /// Zero when the class is never predicted.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub metadata: serde_json::Value,
}

impl EvalReport {
    pub fn from_predictions(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() || truth.is_empty() {
            return Err(Error::InvalidInput(format!(
                "{} labels and {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= num_classes || p >= num_classes {
                return Err(Error::InvalidInput(format!("class outside [0, {num_classes})")));
            }
            confusion[t][p] += 1;
        }
        let per_class: Vec<ClassMetrics> = (0..num_classes)
            .map(|c| {
                let tp = confusion[c][c] as f64;
                let support: usize = confusion[c].iter().sum();
                let predicted: usize = confusion.iter().map(|row| row[c]).sum();
                let ratio = |a: f64, b: usize| if b == 0 { 0.0 } else { a / b as f64 };
                let (precision, recall) = (ratio(tp, predicted), ratio(tp, support));
                let f1 = if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                };
                ClassMetrics {
                    class_id: c,
                    support,
                    precision,
                    recall,
                    f1,
                }
            })
            .collect();
        let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
        Ok(Self {
            accuracy: correct as f64 / truth.len() as f64,
            macro_f1: per_class.iter().map(|m| m.f1).sum::<f64>() / num_classes as f64,
            per_class,
            confusion,
            metadata: serde_json::Value::Null,
        })
    }

    pub fn with_metadata(mut self, metadata: serde_json::Value) -> Self {
        self.metadata = metadata;
        self
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    /// Fraction of all test windows predicted as their mirror class.
    pub fn pair_confusion_mass(&self, pairs: &[(usize, usize)]) -> f64 {
        let off: usize = pairs.iter().map(|&(a, b)| self.confusion[a][b] + self.confusion[b][a]).sum();
        off as f64 / self.total() as f64
    }

    /// Rows must sum to class supports and accuracy must equal trace over
    /// total.
    pub fn check_invariants(&self) -> Result<()> {
        let k = self.confusion.len();
        for (c, m) in self.per_class.iter().enumerate() {
            if self.confusion[c].iter().sum::<usize>() != m.support {
                return Err(Error::InvalidInput(format!("confusion row {c} disagrees with support")));
            }
        }
        let trace: usize = (0..k).map(|c| self.confusion[c][c]).sum();
        if (trace as f64 / self.total() as f64 - self.accuracy).abs() > 1e-12 {
            return Err(Error::InvalidInput("accuracy differs from trace / total".into()));
        }
        Ok(())
    }
}
