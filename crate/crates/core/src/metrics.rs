use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Square confusion matrix; rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { counts: vec![vec![0; classes]; classes] }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if counts.iter().any(|r| r.len() != k) {
            return Err(Error::dim("confusion", format!("matrix must be square, got {k} rows")));
        }
        Ok(Self { counts })
    }

    pub fn from_pairs(classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::dim("confusion", format!("{} labels vs {} predictions", truth.len(), predicted.len())));
        }
        let mut m = Self::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            m.record(t, p)?;
        }
        Ok(m)
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let k = self.classes();
        if truth >= k || predicted >= k {
            return Err(Error::dim("confusion", format!("label ({truth}, {predicted}) outside {k} classes")));
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..self.classes()).map(|i| self.counts[i][i]).sum::<u64>() as f64 / total as f64
    }

    pub fn per_class(&self) -> Vec<ClassMetrics> {
        let k = self.classes();
        (0..k)
            .map(|c| {
                let tp = self.counts[c][c] as f64;
                let support = self.counts[c].iter().sum::<u64>();
                let predicted = (0..k).map(|r| self.counts[r][c]).sum::<u64>();
                let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
                let recall = if support > 0 { tp / support as f64 } else { 0.0 };
                let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
                ClassMetrics { precision, recall, f1, support, degenerate: support == 0 || predicted == 0 }
            })
            .collect()
    }

    /// Unweighted mean of per-class F1. Classes with no support and no
    /// predictions contribute 0 and are flagged as degenerate in
    /// [`ConfusionMatrix::per_class`].
    pub fn macro_f1(&self) -> f64 {
        let k = self.classes();
        if k == 0 {
            return 0.0;
        }
        self.per_class().iter().map(|m| m.f1).sum::<f64>() / k as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// No true or no predicted instances; F1 is defined as 0.
    pub degenerate: bool,
}

pub fn macro_f1(classes: usize, truth: &[usize], predicted: &[usize]) -> Result<f64> {
    Ok(ConfusionMatrix::from_pairs(classes, truth, predicted)?.macro_f1())
}

/// Scores of one evaluation. For open-set runs the confusion matrix has an
/// extra last row/column for unseen activities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub macro_f1: f64,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ClassMetrics>,
    pub openset: Option<OpenSetMetrics>,
}

impl EvalReport {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Self {
        Self {
            macro_f1: confusion.macro_f1(),
            accuracy: confusion.accuracy(),
            per_class: confusion.per_class(),
            confusion,
            openset: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenSetMetrics {
    pub alpha: f64,
    pub threshold: f64,
    /// Accuracy of the known-vs-unseen decision alone.
    pub binary_accuracy: f64,
    /// Accuracy over known classes plus unseen.
    pub joint_accuracy: f64,
}
