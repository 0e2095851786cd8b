//! Training loop: plateau LR decay, early stopping and best-epoch selection.

use alloc::borrow::Cow;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentPolicy, AugmentPools};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::dmha::DmhaModel;
use crate::error::{Error, Result};
use crate::features::{FeatureRecord, MelExtractor};
use crate::graph::Graph;
use crate::loss::{focal_loss, wce_loss, ClassWeights, LossKind};
use crate::metrics::{argmax, macro_f1};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{mix, purpose, stream, Rng};
use crate::tensor::Tensor;
use crate::NUM_CLASSES;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub initial_lr: f64,
    /// LR multiplier applied after `decay_patience_epochs` epochs without
    /// validation improvement.
    pub lr_decay: f64,
    pub decay_patience_epochs: usize,
    pub early_stop_patience_epochs: usize,
    pub loss: LossKind,
    /// Focal-loss exponent; ignored by WCE.
    pub gamma: f64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 20,
            initial_lr: 1e-4,
            lr_decay: 0.5,
            decay_patience_epochs: 5,
            early_stop_patience_epochs: 5,
            loss: LossKind::Wce,
            gamma: 2.0,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("batch_size and max_epochs must be positive"));
        }
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return Err(Error::invalid(format!("initial_lr {} must be positive", self.initial_lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return Err(Error::invalid(format!("lr_decay {} not in (0, 1)", self.lr_decay)));
        }
        if self.decay_patience_epochs == 0 || self.early_stop_patience_epochs == 0 {
            return Err(Error::invalid("patience values must be at least 1"));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::invalid(format!("gamma {} must be >= 0", self.gamma)));
        }
        Ok(())
    }
}

/// Multiplies the LR by `decay` after `patience` consecutive epochs without
/// improvement, then starts counting again.
#[derive(Clone, Debug)]
pub struct PlateauSchedule {
    lr: f64,
    decay: f64,
    patience: usize,
    stale: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, decay: f64, patience: usize) -> Self {
        Self { lr, decay, patience, stale: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one epoch's outcome and returns the LR for the next epoch.
    pub fn observe(&mut self, improved: bool) -> f64 {
        if improved {
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale == self.patience {
                self.lr *= self.decay;
                self.stale = 0;
            }
        }
        self.lr
    }
}

/// Signals a stop once `patience` consecutive epochs fail to improve.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, stale: 0 }
    }

    pub fn observe(&mut self, improved: bool) -> bool {
        self.stale = if improved { 0 } else { self.stale + 1 };
        self.stale >= self.patience
    }
}

/// Source of training examples. Training views may be stochastic (drawn
/// from the per-utterance stream passed in); evaluation views must not be.
pub trait Dataset {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn label(&self, i: usize) -> usize;

    fn train_item(&self, i: usize, rng: &mut Rng) -> Result<Cow<'_, FeatureRecord>>;

    fn eval_item(&self, i: usize) -> Result<Cow<'_, FeatureRecord>>;
}

/// Precomputed feature records; no augmentation.
impl Dataset for [FeatureRecord] {
    fn len(&self) -> usize {
        <[FeatureRecord]>::len(self)
    }

    fn label(&self, i: usize) -> usize {
        self[i].label
    }

    fn train_item(&self, i: usize, _rng: &mut Rng) -> Result<Cow<'_, FeatureRecord>> {
        Ok(Cow::Borrowed(&self[i]))
    }

    fn eval_item(&self, i: usize) -> Result<Cow<'_, FeatureRecord>> {
        Ok(Cow::Borrowed(&self[i]))
    }
}

#[derive(Clone, Debug)]
pub struct Waveform {
    pub id: String,
    /// Normalized samples at the extractor's sample rate.
    pub samples: Vec<f32>,
    pub label: usize,
}

/// Waveforms turned into single-layer mel records on the fly, augmented in
/// training mode.
pub struct WaveformDataset {
    pub items: Vec<Waveform>,
    pub policy: AugmentPolicy,
    pub pools: AugmentPools,
    pub extractor: MelExtractor,
}

impl WaveformDataset {
    fn record(&self, i: usize, samples: &[f32]) -> Result<FeatureRecord> {
        let mel = self.extractor.extract(samples)?;
        let (frames, bins) = mel.matrix_dims();
        let acoustic = mel.reshape(&[1, frames, bins])?;
        FeatureRecord::new(self.items[i].id.clone(), acoustic, None, self.items[i].label)
    }
}

impl Dataset for WaveformDataset {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn label(&self, i: usize) -> usize {
        self.items[i].label
    }

    fn train_item(&self, i: usize, rng: &mut Rng) -> Result<Cow<'_, FeatureRecord>> {
        let rate = self.extractor.config().sample_rate;
        let (samples, _) = augment(&self.items[i].samples, &self.policy, &self.pools, rate, rng, true)?;
        Ok(Cow::Owned(self.record(i, &samples)?))
    }

    fn eval_item(&self, i: usize) -> Result<Cow<'_, FeatureRecord>> {
        Ok(Cow::Owned(self.record(i, &self.items[i].samples)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// LR used during this epoch.
    pub lr: f64,
    pub train_loss: f64,
    /// Eval-mode macro-F1 on the training set.
    pub train_macro_f1: f64,
    pub val_macro_f1: f64,
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Snapshot from the best validation epoch.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochMetrics>,
}

/// Eval-mode probabilities for every item of `data`.
pub fn predict_dataset<D: Dataset + ?Sized>(model: &DmhaModel<f32>, data: &D, batch_size: usize) -> Result<Vec<[f32; NUM_CLASSES]>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let records = chunk.iter().map(|&i| data.eval_item(i).map(Cow::into_owned)).collect::<Result<Vec<_>>>()?;
        out.extend(model.predict_proba(&records, records.len())?);
    }
    Ok(out)
}

fn dataset_macro_f1<D: Dataset + ?Sized>(model: &DmhaModel<f32>, data: &D, batch_size: usize) -> Result<f64> {
    let probs = predict_dataset(model, data, batch_size)?;
    let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let truth: Vec<usize> = (0..data.len()).map(|i| data.label(i)).collect();
    macro_f1(&preds, &truth, NUM_CLASSES)
}

fn diverged(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(op) => Error::Diverged {
            epoch,
            step,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Trains `model` in place and returns the best-validation checkpoint.
///
/// Each epoch shuffles the training order on its own stream, runs one
/// AdamW step per batch, then scores validation macro-F1. All randomness is
/// derived from `seed`, so equal seeds give identical runs.
pub fn train_loop<Tr, Va, F>(
    model: &mut DmhaModel<f32>,
    train: &Tr,
    val: &Va,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    Tr: Dataset + ?Sized,
    Va: Dataset + ?Sized,
    F: FnMut(&EpochMetrics),
{
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training and validation sets must be nonempty"));
    }
    let labels: Vec<usize> = (0..train.len()).map(|i| train.label(i)).collect();
    let weights = ClassWeights::from_labels(&labels)?;
    let mut opt = AdamW::new(&model.params, cfg.initial_lr, cfg.optimizer);
    let mut schedule = PlateauSchedule::new(cfg.initial_lr, cfg.lr_decay, cfg.decay_patience_epochs);
    let mut early = EarlyStopping::new(cfg.early_stop_patience_epochs);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Vec<(String, Tensor<f32>)>)> = None;
    let mut step = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let lr = schedule.lr();
        opt.lr = lr;
        order.shuffle(&mut stream(seed, purpose::SHUFFLE, epoch as u64));
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            step += 1;
            let items = chunk
                .iter()
                .map(|&i| train.train_item(i, &mut stream(seed, purpose::AUGMENT, mix(epoch as u64, i as u64))))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&FeatureRecord> = items.iter().map(|c| c.as_ref()).collect();
            let batch_labels: Vec<usize> = refs.iter().map(|r| r.label).collect();

            let mut dropout_rng = stream(seed, purpose::DROPOUT, mix(epoch as u64, b as u64));
            let mut g = Graph::new();
            let result = (|| {
                let bound = model.bind(&mut g)?;
                let probs = model.forward_batch(&mut g, &bound, &refs, true, &mut dropout_rng)?;
                let loss = match cfg.loss {
                    LossKind::Wce => wce_loss(&mut g, probs, &batch_labels, &weights)?,
                    LossKind::Focal => focal_loss(&mut g, probs, &batch_labels, cfg.gamma)?,
                };
                model.params.zero_grad();
                g.backward(loss, &mut model.params)?;
                opt.step(&mut model.params)?;
                Ok(g.value(loss)[0] as f64)
            })();
            let loss = result.map_err(|e| diverged(epoch, step, e))?;
            loss_sum += loss * chunk.len() as f64;
        }

        let val_f1 = dataset_macro_f1(model, val, cfg.batch_size)?;
        let train_f1 = dataset_macro_f1(model, train, cfg.batch_size)?;
        let improved = best.as_ref().is_none_or(|(f, _, _)| val_f1 > *f);
        if improved {
            best = Some((val_f1, epoch, model.named_tensors()));
        }
        let metrics = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            train_macro_f1: train_f1,
            val_macro_f1: val_f1,
            improved,
        };
        on_epoch(&metrics);
        history.push(metrics);
        schedule.observe(improved);
        if early.observe(improved) {
            break;
        }
    }

    let (val_f1, epoch, tensors) = best.ok_or_else(|| Error::invalid("no epoch completed".to_string()))?;
    model.load_named(&tensors)?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            tensors,
            meta: CheckpointMeta {
                model: model.config().clone(),
                train: cfg.clone(),
                seed,
                epoch,
                val_macro_f1: val_f1,
                thresholds: None,
            },
        },
        history,
    })
}
