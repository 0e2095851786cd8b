//! Run configuration: one JSON document, every field defaulted, unknown
//! keys rejected.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dmha_core::augment::AugmentPolicy;
use dmha_core::features::{MelConfig, SynthConfig};
use dmha_core::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentPolicy,
    pub data: DataConfig,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    /// Generator settings for `synth`.
    pub synth: SynthConfig,
    /// Front end for `extract` and waveform training.
    pub mel: MelConfig,
    pub rir_paths: Vec<PathBuf>,
    pub noise_paths: Vec<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().context("train section")?;
        self.augment.validate().context("augment section")?;
        dmha_core::features::MelExtractor::new(self.data.mel).context("data.mel section")?;
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
