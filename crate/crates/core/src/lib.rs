//! Double multi-head attention (DMHA) fusion for speech emotion recognition.
//!
//! `no_std` + `alloc`. The crate holds every numeric piece of the system:
//!
//! - [`tensor`], [`graph`], [`optim`]: dense tensors, a tape-based reverse-mode
//!   autodiff engine and the AdamW optimizer.
//! - [`dmha`]: first-layer attention (standard or sub-vector), attention
//!   pooling, acoustic/text early fusion and the classification head.
//! - [`features`]: layer aggregation, waveform normalization, a log-mel
//!   extractor and a synthetic multimodal dataset generator.
//! - [`augment`]: on-line waveform augmentation.
//! - [`loss`], [`metrics`], [`train`]: class-imbalance losses, macro-F1 and the
//!   training loop.
//! - [`postprocess`]: per-class threshold adjustment and hard voting.
//! - [`checkpoint`], [`rng`]: model snapshots and the seeded random streams
//!   every stochastic step draws from.
//! - [`gradcheck`]: finite-difference verification of analytic gradients.
//!
//! File formats, configuration files and the command line live in the `dmha`
//! companion crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod augment;
pub mod checkpoint;
pub mod dmha;
mod error;
pub mod features;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod postprocess;
pub mod rng;
pub mod tensor;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use dmha::{AttentionVariant, DmhaModel, ModelConfig, ParamCounts};
pub use error::{Error, Result};
pub use features::{Emotion, FeatureRecord};
pub use graph::{Graph, Var};
pub use optim::AdamW;
pub use postprocess::{EnsembleSpec, ThresholdSet};
pub use tensor::{ParamId, ParamStore, Scalar, Tensor};
pub use train::TrainConfig;

/// Number of emotion classes.
pub const NUM_CLASSES: usize = 8;
