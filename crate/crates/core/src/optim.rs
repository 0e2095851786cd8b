//! AdamW with decoupled weight decay and bias correction.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state: one first/second moment buffer per parameter.
#[derive(Clone, Debug)]
pub struct AdamW<T = f32> {
    pub config: AdamWConfig,
    pub lr: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, config: AdamWConfig) -> Self {
        let zeros = |p: &crate::tensor::Param<T>| vec![T::zero(); p.tensor.numel()];
        Self {
            config,
            lr,
            step: 0,
            m: store.iter().map(zeros).collect(),
            v: store.iter().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter from its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::invalid("parameter set changed since optimizer creation"));
        }
        if let Some(missing) = store.iter().find(|p| p.tensor.grad().is_none()) {
            return Err(Error::MissingGrad(missing.name.clone()));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - libm::pow(c.beta1, t as f64);
        let bias2 = 1.0 - libm::pow(c.beta2, t as f64);
        let lr = T::of(self.lr);
        let decay = T::of(1.0 - self.lr * c.weight_decay);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let (inv_bias1, inv_bias2) = (T::of(1.0 / bias1), T::of(1.0 / bias2));
        let eps = T::of(c.eps);

        for ((param, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = param.tensor.grad().expect("checked above").to_vec();
            let w = param.tensor.data_mut();
            for k in 0..w.len() {
                let g = grad[k];
                m[k] = b1 * m[k] + one_b1 * g;
                v[k] = b2 * v[k] + one_b2 * g * g;
                let m_hat = m[k] * inv_bias1;
                let v_hat = v[k] * inv_bias2;
                w[k] = w[k] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
            if w.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("adamw_step"));
            }
        }
        Ok(())
    }
}
