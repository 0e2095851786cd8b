//! Confusion matrices and macro-F1.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[truth][pred]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

impl ConfusionMatrix {
    pub fn new(preds: &[usize], truth: &[usize], n_classes: usize) -> Result<Self> {
        if preds.len() != truth.len() {
            return Err(Error::invalid(alloc::format!(
                "{} predictions for {} labels",
                preds.len(),
                truth.len()
            )));
        }
        if preds.is_empty() {
            return Err(Error::invalid("no predictions"));
        }
        let mut counts = vec![vec![0u64; n_classes]; n_classes];
        for (&p, &t) in preds.iter().zip(truth) {
            if p >= n_classes {
                return Err(Error::InvalidLabel(p));
            }
            if t >= n_classes {
                return Err(Error::InvalidLabel(t));
            }
            counts[t][p] += 1;
        }
        Ok(Self { counts })
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let n = counts.len();
        if n == 0 || counts.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("confusion matrix must be square and non-empty"));
        }
        Ok(Self { counts })
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    /// One-vs-rest scores; empty denominators score 0.
    pub fn class_scores(&self, class: usize) -> ClassScores {
        let tp = self.counts[class][class];
        let actual: u64 = self.counts[class].iter().sum();
        let predicted: u64 = self.counts.iter().map(|r| r[class]).sum();
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, actual);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassScores {
            precision,
            recall,
            f1,
            support: actual,
        }
    }

    /// Unweighted mean of per-class F1 over every class, including classes
    /// with no support.
    pub fn macro_f1(&self) -> f64 {
        let n = self.n_classes();
        (0..n).map(|c| self.class_scores(c).f1).sum::<f64>() / n as f64
    }
}

pub fn macro_f1(preds: &[usize], truth: &[usize], n_classes: usize) -> Result<f64> {
    Ok(ConfusionMatrix::new(preds, truth, n_classes)?.macro_f1())
}

pub fn argmax(probs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}
