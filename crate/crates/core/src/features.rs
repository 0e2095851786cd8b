//! Model inputs: feature records, waveform statistics, a log-mel extractor
//! standing in for pre-trained speech encoders, and a synthetic multimodal
//! dataset generator.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng;
use crate::tensor::{Scalar, Tensor};
use crate::NUM_CLASSES;

/// Emotion classes in label-index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Anger,
    Happiness,
    Sadness,
    Fear,
    Surprise,
    Contempt,
    Disgust,
    Neutral,
}

impl Emotion {
    pub const ALL: [Emotion; NUM_CLASSES] = [
        Emotion::Anger,
        Emotion::Happiness,
        Emotion::Sadness,
        Emotion::Fear,
        Emotion::Surprise,
        Emotion::Contempt,
        Emotion::Disgust,
        Emotion::Neutral,
    ];

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Emotion::Anger => "anger",
            Emotion::Happiness => "happiness",
            Emotion::Sadness => "sadness",
            Emotion::Fear => "fear",
            Emotion::Surprise => "surprise",
            Emotion::Contempt => "contempt",
            Emotion::Disgust => "disgust",
            Emotion::Neutral => "neutral",
        }
    }
}

/// One utterance: per-layer acoustic frames `[layers × T1 × D]`, text frames
/// `[T2 × D]` (absent for an empty transcript) and the class label.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub utterance_id: String,
    pub acoustic: Tensor<f32>,
    pub text: Option<Tensor<f32>>,
    pub label: usize,
}

impl FeatureRecord {
    pub fn new(utterance_id: impl Into<String>, acoustic: Tensor<f32>, text: Option<Tensor<f32>>, label: usize) -> Result<Self> {
        let rec = Self {
            utterance_id: utterance_id.into(),
            acoustic,
            text,
            label,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.acoustic.rank() != 3 {
            return Err(Error::shape("feature_record", alloc::format!("acoustic dims {:?}", self.acoustic.dims())));
        }
        if let Some(text) = &self.text {
            if text.rank() != 2 || text.dims()[1] != self.dim() {
                return Err(Error::shape(
                    "feature_record",
                    alloc::format!("text dims {:?} vs acoustic dim {}", text.dims(), self.dim()),
                ));
            }
        }
        if self.label >= NUM_CLASSES {
            return Err(Error::InvalidLabel(self.label));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.acoustic.dims()[0]
    }

    pub fn frames(&self) -> usize {
        self.acoustic.dims()[1]
    }

    pub fn dim(&self) -> usize {
        self.acoustic.dims()[2]
    }

    pub fn text_frames(&self) -> usize {
        self.text.as_ref().map_or(0, |t| t.dims()[0])
    }
}

/// Weighted sum of extractor layers with softmax-normalised learnable logits.
///
/// `acoustic` is `[layers × (T1·D)]`, `logits` holds one value per layer. The
/// result has dims `[frames × dim]`.
pub fn aggregate_layers<T: Scalar>(g: &mut Graph<T>, acoustic: Var, logits: Var, frames: usize, dim: usize) -> Result<Var> {
    let (layers, width) = g.rows_cols(acoustic);
    if g.value(logits).len() != layers {
        return Err(Error::shape(
            "aggregate_layers",
            alloc::format!("{} layer weights for {layers} layers", g.value(logits).len()),
        ));
    }
    if width != frames * dim {
        return Err(Error::shape("aggregate_layers", alloc::format!("row width {width} != {frames}x{dim}")));
    }
    let row = g.reshape(logits, &[1, layers])?;
    let weights = g.softmax_rows(row)?;
    let mixed = g.matmul(weights, acoustic)?;
    g.reshape(mixed, &[frames, dim])
}

/// Effective layer weights for `logits`.
pub fn layer_weights(logits: &[f32]) -> Vec<f32> {
    let mut w = logits.to_vec();
    crate::tensor::kernels::softmax_in_place(&mut w);
    w
}

/// Global waveform statistics of a training corpus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveformStats {
    pub mean: f64,
    pub std: f64,
}

impl Default for WaveformStats {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

impl WaveformStats {
    /// Pooled mean and (population) standard deviation over every sample of
    /// every signal, accumulated in one Welford pass.
    pub fn from_corpus<'a>(signals: impl IntoIterator<Item = &'a [f32]>) -> Result<Self> {
        let (mut n, mut mean, mut m2) = (0u64, 0.0f64, 0.0f64);
        for s in signals {
            for &x in s {
                n += 1;
                let x = x as f64;
                let delta = x - mean;
                mean += delta / n as f64;
                m2 += delta * (x - mean);
            }
        }
        if n == 0 {
            return Err(Error::invalid("empty corpus"));
        }
        Ok(Self {
            mean,
            std: libm::sqrt(m2 / n as f64),
        })
    }
}

pub fn normalize_waveform(samples: &[f32], stats: WaveformStats) -> Result<Vec<f32>> {
    if !(stats.std > 0.0) || !stats.std.is_finite() {
        return Err(Error::invalid(alloc::format!("waveform std must be positive, got {}", stats.std)));
    }
    Ok(samples.iter().map(|&x| ((x as f64 - stats.mean) / stats.std) as f32).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_mels: 40,
            frame_ms: 25.0,
            hop_ms: 10.0,
            f_min: 0.0,
            f_max: 8_000.0,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * libm::log10(1.0 + hz / 700.0)
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (libm::pow(10.0, mel / 2595.0) - 1.0)
}

/// Hann-windowed DFT magnitude → triangular mel bank → `ln(x + 1e-6)`.
#[derive(Clone, Debug)]
pub struct MelExtractor {
    config: MelConfig,
    frame: usize,
    hop: usize,
    window: Vec<f64>,
    cos: Vec<f64>,
    sin: Vec<f64>,
    bank: Vec<Vec<(usize, f64)>>,
    centers: Vec<f64>,
}

impl MelExtractor {
    pub fn new(config: MelConfig) -> Result<Self> {
        let rate = config.sample_rate as f64;
        let frame = libm::round(config.frame_ms * rate / 1000.0) as usize;
        let hop = libm::round(config.hop_ms * rate / 1000.0) as usize;
        if frame < 2 || hop == 0 || config.n_mels == 0 {
            return Err(Error::invalid("mel extractor needs frame >= 2, hop >= 1, n_mels >= 1"));
        }
        if !(config.f_min >= 0.0 && config.f_max > config.f_min && config.f_max <= rate / 2.0) {
            return Err(Error::invalid("mel band edges must satisfy 0 <= f_min < f_max <= rate/2"));
        }
        // periodic Hann
        let window = (0..frame)
            .map(|n| 0.5 - 0.5 * libm::cos(2.0 * PI * n as f64 / frame as f64))
            .collect();
        let n_bins = frame / 2 + 1;
        let mut cos = vec![0.0; frame];
        let mut sin = vec![0.0; frame];
        for n in 0..frame {
            let phase = 2.0 * PI * n as f64 / frame as f64;
            cos[n] = libm::cos(phase);
            sin[n] = libm::sin(phase);
        }
        let (mel_lo, mel_hi) = (hz_to_mel(config.f_min), hz_to_mel(config.f_max));
        let edges: Vec<f64> = (0..config.n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (config.n_mels + 1) as f64))
            .collect();
        let bin_hz = rate / frame as f64;
        let bank = (0..config.n_mels)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..n_bins)
                    .filter_map(|k| {
                        let f = k as f64 * bin_hz;
                        let w = if f > lo && f <= mid {
                            (f - lo) / (mid - lo)
                        } else if f > mid && f < hi {
                            (hi - f) / (hi - mid)
                        } else {
                            0.0
                        };
                        (w > 0.0).then_some((k, w))
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            config,
            frame,
            hop,
            window,
            cos,
            sin,
            bank,
            centers: edges[1..=config.n_mels].to_vec(),
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.config
    }

    /// Center frequency (Hz) of each mel filter.
    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn frame_len(&self) -> usize {
        self.frame
    }

    pub fn num_frames(&self, samples: usize) -> usize {
        if samples < self.frame {
            0
        } else {
            1 + (samples - self.frame) / self.hop
        }
    }

    /// `[frames × n_mels]` log-mel features.
    pub fn extract(&self, samples: &[f32]) -> Result<Tensor<f32>> {
        let frames = self.num_frames(samples.len());
        if frames == 0 {
            return Err(Error::invalid(alloc::format!(
                "need at least {} samples for one frame, got {}",
                self.frame,
                samples.len()
            )));
        }
        let n_bins = self.frame / 2 + 1;
        let n_mels = self.config.n_mels;
        let mut out = Vec::with_capacity(frames * n_mels);
        let mut windowed = vec![0.0f64; self.frame];
        let mut mag = vec![0.0f64; n_bins];
        for t in 0..frames {
            let chunk = &samples[t * self.hop..t * self.hop + self.frame];
            for (w, (&x, &h)) in windowed.iter_mut().zip(chunk.iter().zip(&self.window)) {
                *w = x as f64 * h;
            }
            for (k, m) in mag.iter_mut().enumerate() {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, &x) in windowed.iter().enumerate() {
                    let idx = (k * n) % self.frame;
                    re += x * self.cos[idx];
                    im -= x * self.sin[idx];
                }
                *m = libm::sqrt(re * re + im * im);
            }
            for filter in &self.bank {
                let energy: f64 = filter.iter().map(|&(k, w)| w * mag[k]).sum();
                out.push(libm::log(energy + 1e-6) as f32);
            }
        }
        Tensor::new(vec![frames, n_mels], out)
    }
}

/// Relative class frequencies used when `imbalanced` synthetic data is
/// requested: anger … neutral.
pub const IMBALANCE_PROFILE: [usize; NUM_CLASSES] = [8, 4, 4, 1, 2, 2, 1, 10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub acoustic_frames: usize,
    pub text_frames: usize,
    pub dim: usize,
    pub layers: usize,
    pub sigma: f64,
    pub imbalanced: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_per_class: 50,
            acoustic_frames: 12,
            text_frames: 4,
            dim: 16,
            layers: 3,
            sigma: 0.1,
            imbalanced: true,
        }
    }
}

impl SynthConfig {
    /// Records per class. With the imbalance profile the total stays
    /// `8 · n_per_class` and each class gets a share proportional to its
    /// profile weight (at least one record).
    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        if !self.imbalanced {
            return [self.n_per_class; NUM_CLASSES];
        }
        let total_weight: usize = IMBALANCE_PROFILE.iter().sum();
        let mut counts = [0; NUM_CLASSES];
        for (c, &w) in counts.iter_mut().zip(&IMBALANCE_PROFILE) {
            let exact = (self.n_per_class * NUM_CLASSES * w) as f64 / total_weight as f64;
            *c = (libm::round(exact) as usize).max(1);
        }
        counts
    }

    fn validate(&self) -> Result<()> {
        if self.n_per_class == 0 || self.acoustic_frames == 0 || self.dim == 0 || self.layers == 0 {
            return Err(Error::invalid("synthetic dataset sizes must be positive"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid("sigma must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Per-class mean vectors `(acoustic, text)`, each `[8][dim]`, drawn from
/// `Normal(0, 1)` on the seed's mean stream.
pub fn class_means(cfg: &SynthConfig, seed: u64) -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
    let mut r = rng::stream(seed, rng::purpose::SYNTH_MEANS, 0);
    let mut draw = || -> Vec<Vec<f32>> {
        (0..NUM_CLASSES)
            .map(|_| (0..cfg.dim).map(|_| r.sample::<f32, _>(rand_distr::StandardNormal)).collect())
            .collect()
    };
    let acoustic = draw();
    let text = draw();
    (acoustic, text)
}

/// Synthetic utterances with class-conditional Gaussian frames.
///
/// Class means depend only on `seed`; `split` selects an independent noise
/// stream, so train/validation splits share means but not samples.
/// Records are ordered by class, then index, and every record draws from
/// its own stream.
pub fn synth_dataset(cfg: &SynthConfig, seed: u64, split: u64) -> Result<Vec<FeatureRecord>> {
    cfg.validate()?;
    let (mu_a, mu_t) = class_means(cfg, seed);
    let noise = Normal::new(0.0f32, cfg.sigma as f32).map_err(|_| Error::invalid("bad sigma"))?;
    let counts = cfg.class_counts();
    let mut records = Vec::with_capacity(counts.iter().sum());
    for (label, &count) in counts.iter().enumerate() {
        for i in 0..count {
            let stream_id = rng::mix(rng::mix(split, label as u64), i as u64);
            let mut r = rng::stream(seed, rng::purpose::SYNTH_SAMPLES, stream_id);
            let acoustic = Tensor::from_fn(&[cfg.layers, cfg.acoustic_frames, cfg.dim], |k| {
                mu_a[label][k % cfg.dim] + noise.sample(&mut r)
            });
            let text = (cfg.text_frames > 0).then(|| {
                Tensor::from_fn(&[cfg.text_frames, cfg.dim], |k| mu_t[label][k % cfg.dim] + noise.sample(&mut r))
            });
            let id = alloc::format!("synth-s{split}-{}-{i:04}", Emotion::ALL[label].name());
            records.push(FeatureRecord::new(id, acoustic, text, label)?);
        }
    }
    Ok(records)
}
