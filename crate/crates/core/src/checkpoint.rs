//! In-memory checkpoint: named parameter snapshot plus metadata. The binary
//! encoding lives in the `dmha` crate.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dmha::{DmhaModel, ModelConfig};
use crate::error::Result;
use crate::postprocess::ThresholdSet;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    /// 1-based epoch the snapshot was taken after.
    pub epoch: usize,
    pub val_macro_f1: f64,
    #[serde(default)]
    pub thresholds: Option<ThresholdSet>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn from_model(model: &DmhaModel<f32>, meta: CheckpointMeta) -> Self {
        Self {
            tensors: model.named_tensors(),
            meta,
        }
    }

    pub fn to_model(&self) -> Result<DmhaModel<f32>> {
        let mut model = DmhaModel::zeros(self.meta.model.clone())?;
        model.load_named(&self.tensors)?;
        Ok(model)
    }

    pub fn thresholds(&self) -> ThresholdSet {
        self.meta.thresholds.unwrap_or_default()
    }
}
