//! Per-class decision thresholds and three-model hard voting.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::NUM_CLASSES;

/// Threshold grid `{0, 0.01, …, 0.99}`.
pub const GRID_STEPS: usize = 100;
pub const GRID_STEP: f32 = 0.01;

/// Per-class thresholds in class-index order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet(pub [f32; NUM_CLASSES]);

impl ThresholdSet {
    pub fn zeros() -> Self {
        Self([0.0; NUM_CLASSES])
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().all(|t| t.is_finite() && (0.0..1.0).contains(t)) {
            Ok(())
        } else {
            Err(Error::invalid(alloc::format!("thresholds must lie in [0, 1): {:?}", self.0)))
        }
    }
}

fn grid_value(i: usize) -> f32 {
    i as f32 / GRID_STEPS as f32
}

/// Top class if its probability exceeds its threshold, otherwise the
/// second-highest class. Probability ties go to the lower class index.
pub fn predict_with_thresholds(probs: &[f32; NUM_CLASSES], thresholds: &ThresholdSet) -> usize {
    let top = crate::metrics::argmax(probs);
    if probs[top] > thresholds.0[top] {
        return top;
    }
    let mut second = if top == 0 { 1 } else { 0 };
    for (i, &p) in probs.iter().enumerate() {
        if i != top && p > probs[second] {
            second = i;
        }
    }
    second
}

pub fn predict_all(probs: &[[f32; NUM_CLASSES]], thresholds: &ThresholdSet) -> Vec<usize> {
    probs.iter().map(|p| predict_with_thresholds(p, thresholds)).collect()
}

fn score(probs: &[[f32; NUM_CLASSES]], truth: &[usize], thresholds: &ThresholdSet) -> Result<f64> {
    Ok(ConfusionMatrix::new(&predict_all(probs, thresholds), truth, NUM_CLASSES)?.macro_f1())
}

/// Single coordinate-ascent pass in class-index order. Starting from all
/// zeros, each class scans the grid with the others fixed and keeps the value
/// with the highest macro-F1; ties keep the smaller threshold.
pub fn tune_thresholds(probs: &[[f32; NUM_CLASSES]], truth: &[usize]) -> Result<ThresholdSet> {
    let mut t = ThresholdSet::zeros();
    let mut best = score(probs, truth, &t)?;
    for class in 0..NUM_CLASSES {
        let mut best_value = t.0[class];
        for i in 1..GRID_STEPS {
            t.0[class] = grid_value(i);
            let f1 = score(probs, truth, &t)?;
            if f1 > best {
                best = f1;
                best_value = t.0[class];
            }
        }
        t.0[class] = best_value;
    }
    Ok(t)
}

/// Three ensemble members and the member whose prediction settles a
/// three-way disagreement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: Vec<String>,
    pub tie_breaker: usize,
}

impl EnsembleSpec {
    pub fn new(members: Vec<String>, tie_breaker: usize) -> Result<Self> {
        let spec = Self { members, tie_breaker };
        spec.validate()?;
        Ok(spec)
    }

    /// Tie-breaker = member with the best validation macro-F1 (lowest index
    /// on equal scores).
    pub fn with_best_member(members: Vec<String>, val_macro_f1: &[f64]) -> Result<Self> {
        if val_macro_f1.len() != 3 {
            return Err(Error::invalid("need one validation score per member"));
        }
        let mut best = 0;
        for (i, &f) in val_macro_f1.iter().enumerate() {
            if f > val_macro_f1[best] {
                best = i;
            }
        }
        Self::new(members, best)
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.len() != 3 {
            return Err(Error::invalid(alloc::format!("ensemble needs 3 members, got {}", self.members.len())));
        }
        if self.tie_breaker > 2 {
            return Err(Error::invalid(alloc::format!("tie breaker {} not in 0..3", self.tie_breaker)));
        }
        Ok(())
    }
}

/// Majority label of three predictions; the tie-breaker member decides
/// when all three differ.
pub fn hard_vote(preds: [usize; 3], tie_breaker: usize) -> usize {
    let [a, b, c] = preds;
    if a == b || a == c {
        a
    } else if b == c {
        b
    } else {
        preds[tie_breaker]
    }
}
