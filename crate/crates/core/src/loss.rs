//! Class-imbalance losses over predicted probabilities.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Scalar;
use crate::NUM_CLASSES;

/// Floor applied inside `log` so a zero probability stays finite.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Wce,
    Focal,
}

/// Per-class loss weights proportional to inverse training frequency,
/// normalised to mean 1 over the 8 classes. Classes absent from the labels
/// get weight 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(pub [f32; NUM_CLASSES]);

impl ClassWeights {
    pub fn uniform() -> Self {
        Self([1.0; NUM_CLASSES])
    }

    pub fn from_labels(labels: &[usize]) -> Result<Self> {
        let mut counts = [0usize; NUM_CLASSES];
        for &y in labels {
            *counts.get_mut(y).ok_or(Error::InvalidLabel(y))? += 1;
        }
        let inv: Vec<f64> = counts.iter().map(|&c| if c == 0 { 0.0 } else { 1.0 / c as f64 }).collect();
        let mean = inv.iter().sum::<f64>() / NUM_CLASSES as f64;
        if mean == 0.0 {
            return Err(Error::invalid("no labels to derive class weights from"));
        }
        let mut w = [0.0f32; NUM_CLASSES];
        for (dst, v) in w.iter_mut().zip(inv) {
            *dst = (v / mean) as f32;
        }
        Ok(Self(w))
    }
}

fn true_class_probs<T: Scalar>(g: &mut Graph<T>, probs: Var, labels: &[usize]) -> Result<Var> {
    let (rows, cols) = g.rows_cols(probs);
    if cols != NUM_CLASSES || rows != labels.len() {
        return Err(Error::shape(
            "loss",
            alloc::format!("probs [{rows} x {cols}] for {} labels", labels.len()),
        ));
    }
    g.gather_rows(probs, labels)
}

/// Batch mean of `−w[y]·ln p[y]`.
pub fn wce_loss<T: Scalar>(g: &mut Graph<T>, probs: Var, labels: &[usize], weights: &ClassWeights) -> Result<Var> {
    let p = true_class_probs(g, probs, labels)?;
    let logp = g.log_clamped(p, T::of(LOG_FLOOR))?;
    let w: Vec<T> = labels.iter().map(|&y| T::of(weights.0[y] as f64)).collect();
    let w = g.constant(&crate::tensor::Tensor::new(alloc::vec![labels.len(), 1], w)?)?;
    let weighted = g.mul(logp, w)?;
    let mean = g.mean(weighted)?;
    g.scale(mean, -T::one())
}

/// Batch mean of `−(1 − p[y])^γ · ln p[y]`.
pub fn focal_loss<T: Scalar>(g: &mut Graph<T>, probs: Var, labels: &[usize], gamma: f64) -> Result<Var> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(alloc::format!("focal gamma must be >= 0, got {gamma}")));
    }
    let p = true_class_probs(g, probs, labels)?;
    let logp = g.log_clamped(p, T::of(LOG_FLOOR))?;
    let miss = g.affine(p, -T::one(), T::one())?;
    let factor = g.powf(miss, T::of(gamma))?;
    let scaled = g.mul(factor, logp)?;
    let mean = g.mean(scaled)?;
    g.scale(mean, -T::one())
}

/// Unweighted cross-entropy, `−mean ln p[y]`.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, probs: Var, labels: &[usize]) -> Result<Var> {
    let p = true_class_probs(g, probs, labels)?;
    let logp = g.log_clamped(p, T::of(LOG_FLOOR))?;
    let mean = g.mean(logp)?;
    g.scale(mean, -T::one())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn probs(g: &mut Graph<f64>, rows: &[[f64; 8]]) -> Var {
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        g.constant(&Tensor::new(alloc::vec![rows.len(), 8], data).unwrap()).unwrap()
    }

    fn onehot(k: usize) -> [f64; 8] {
        let mut r = [0.0; 8];
        r[k] = 1.0;
        r
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let mut g = Graph::new();
        let p = probs(&mut g, &[onehot(2), onehot(5)]);
        let w = ClassWeights::from_labels(&[2, 5, 5]).unwrap();
        let l = wce_loss(&mut g, p, &[2, 5], &w).unwrap();
        assert_eq!(g.value(l)[0], 0.0);
        for gamma in [0.0, 0.5, 2.0, 5.0] {
            let l = focal_loss(&mut g, p, &[2, 5], gamma).unwrap();
            assert_eq!(g.value(l)[0], 0.0);
        }
    }

    #[test]
    fn wce_two_sample_hand_case() {
        let mut a = [0.05; 8];
        a[0] = 0.65;
        let mut b = [0.1; 8];
        b[3] = 0.3;
        let mut weights = ClassWeights::uniform();
        weights.0[0] = 0.5;
        weights.0[3] = 2.0;
        let mut g = Graph::new();
        let p = probs(&mut g, &[a, b]);
        let l = wce_loss(&mut g, p, &[0, 3], &weights).unwrap();
        let expect = (-0.5 * 0.65f64.ln() - 2.0 * 0.3f64.ln()) / 2.0;
        assert!((g.value(l)[0] - expect).abs() < 1e-6);
    }

    #[test]
    fn focal_half_probability() {
        let mut row = [0.5 / 7.0; 8];
        row[1] = 0.5;
        let mut g = Graph::new();
        let p = probs(&mut g, &[row]);
        let l = focal_loss(&mut g, p, &[1], 2.0).unwrap();
        assert!((g.value(l)[0] - 0.25 * core::f64::consts::LN_2).abs() < 1e-12);
        assert!((g.value(l)[0] - 0.17329).abs() < 1e-5);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let mut g = Graph::new();
        let p = probs(&mut g, &[onehot(0)]);
        let l = cross_entropy(&mut g, p, &[1]).unwrap();
        assert!((g.value(l)[0] + LOG_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn invalid_inputs() {
        let mut g = Graph::new();
        let p = probs(&mut g, &[onehot(0)]);
        assert_eq!(cross_entropy(&mut g, p, &[8]).unwrap_err(), Error::InvalidLabel(8));
        assert!(cross_entropy(&mut g, p, &[0, 1]).is_err());
        assert!(focal_loss(&mut g, p, &[0], -1.0).is_err());
        assert_eq!(ClassWeights::from_labels(&[9]).unwrap_err(), Error::InvalidLabel(9));
    }

    #[test]
    fn class_weights_inverse_frequency_mean_one() {
        let labels = [0, 0, 0, 0, 1, 1, 2, 3, 4, 5, 6, 7];
        let w = ClassWeights::from_labels(&labels).unwrap();
        let mean: f32 = w.0.iter().sum::<f32>() / 8.0;
        assert!((mean - 1.0).abs() < 1e-6);
        assert!((w.0[1] / w.0[0] - 2.0).abs() < 1e-6);
        assert!((w.0[2] / w.0[0] - 4.0).abs() < 1e-6);
        let missing = ClassWeights::from_labels(&[0, 1]).unwrap();
        assert_eq!(missing.0[2], 0.0);
        assert!((missing.0[0] - 4.0).abs() < 1e-6);
    }
}
