//! Central finite-difference gradient checks, run in `f64`.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dmha::{AttentionVariant, DmhaModel, ModelConfig};
use crate::error::{Error, Result};
use crate::features::FeatureRecord;
use crate::graph::{Graph, Var};
use crate::loss::cross_entropy;
use crate::rng::{purpose, stream};
use crate::tensor::{ParamStore, Tensor};

/// Default central-difference step.
pub const STEP: f64 = 1e-5;

/// Worst disagreement inside one parameter tensor. The relative error is
/// `max |analytic − numeric| / max(max |numeric|, 1e-8)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub name: String,
    pub elements: usize,
    pub max_abs_diff: f64,
    pub max_rel_err: f64,
}

/// Compares backprop gradients of `loss` with central differences for every
/// element of every parameter in `store`. Parameter values are restored.
pub fn check_params<F>(store: &mut ParamStore<f64>, step: f64, mut loss: F) -> Result<Vec<GroupError>>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let out = loss(&mut g, store)?;
    g.backward(out, store)?;

    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = loss(&mut g, store)?;
        Ok(g.value(out)[0])
    };

    let mut report = Vec::with_capacity(store.len());
    for id in store.ids().collect::<Vec<_>>() {
        let analytic = store.get(id).grad().ok_or_else(|| Error::MissingGrad(store.name(id).into()))?.to_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        for k in 0..analytic.len() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + step;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[k] = orig - step;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[k] = orig;
            numeric.push((plus - minus) / (2.0 * step));
        }
        let max_abs_diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        let scale = numeric.iter().map(|n| n.abs()).fold(0.0, f64::max).max(1e-8);
        report.push(GroupError {
            name: store.name(id).into(),
            elements: analytic.len(),
            max_abs_diff,
            max_rel_err: max_abs_diff / scale,
        });
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelGradReport {
    pub variant: AttentionVariant,
    pub groups: Vec<GroupError>,
}

impl ModelGradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }
}

/// Small configuration used by the end-to-end check: `D = 8`, `H = 2`.
pub fn small_config(variant: AttentionVariant) -> ModelConfig {
    ModelConfig {
        variant,
        heads: 2,
        dim: 8,
        acoustic_layers: 2,
        hidden_width: 8,
        hidden_layers: 1,
        dropout: 0.1,
    }
}

/// End-to-end check of the cross-entropy gradient for every parameter of a
/// random small model. Acoustic inputs have 3 frames; text inputs 2 frames,
/// with one text-free record in the batch.
///
/// Dropout makes the loss stochastic, so `dropout_active` is refused.
pub fn check_model(variant: AttentionVariant, seed: u64, dropout_active: bool) -> Result<ModelGradReport> {
    if dropout_active {
        return Err(Error::invalid("gradient check needs a deterministic graph; disable dropout"));
    }
    let cfg = small_config(variant);
    let mut r = stream(seed, purpose::INIT, 0);
    let mut model = DmhaModel::<f64>::new(cfg.clone(), &mut r)?;
    // Move biases, gains and logits off their structured initial values so
    // every gradient path carries signal.
    for p in model.params.iter_mut() {
        for v in p.tensor.data_mut() {
            *v += r.random_range(-0.5..0.5);
        }
    }
    let mut normal = |dims: &[usize]| Tensor::<f32>::from_fn(dims, |_| r.random_range(-1.0f32..1.0));
    let records = [
        FeatureRecord::new("g0", normal(&[cfg.acoustic_layers, 3, cfg.dim]), Some(normal(&[2, cfg.dim])), 1)?,
        FeatureRecord::new("g1", normal(&[cfg.acoustic_layers, 3, cfg.dim]), None, 6)?,
        FeatureRecord::new("g2", normal(&[cfg.acoustic_layers, 3, cfg.dim]), Some(normal(&[2, cfg.dim])), 3)?,
    ];
    let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
    let refs: Vec<&FeatureRecord> = records.iter().collect();
    let mut no_dropout = stream(seed, purpose::DROPOUT, 0);

    let shape = model.clone();
    let groups = check_params(&mut model.params, STEP, |g, store| {
        let bound = shape.bind_store(g, store)?;
        let probs = shape.forward_batch(g, &bound, &refs, false, &mut no_dropout)?;
        cross_entropy(g, probs, &labels)
    })?;
    Ok(ModelGradReport { variant, groups })
}
