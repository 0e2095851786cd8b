//! On-line waveform augmentation: window crop with repetition padding, speed
//! perturbation, RIR convolution and SNR-controlled noise mixing.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub apply_prob: f64,
    pub window_seconds: f64,
    pub speed_factors: Vec<f64>,
    /// Inclusive `[low, high]` range in dB, sampled uniformly.
    pub snr_db_range: [f64; 2],
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            apply_prob: 0.5,
            window_seconds: 5.5,
            speed_factors: alloc::vec![0.9, 1.0, 1.1],
            snr_db_range: [5.0, 20.0],
        }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.apply_prob) {
            return Err(Error::invalid(format!("apply_prob {} outside [0, 1]", self.apply_prob)));
        }
        if !(self.window_seconds.is_finite() && self.window_seconds > 0.0) {
            return Err(Error::invalid(format!("window_seconds {} must be positive", self.window_seconds)));
        }
        if self.speed_factors.is_empty() || self.speed_factors.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(Error::invalid("speed factors must be a nonempty list of positive values"));
        }
        let [lo, hi] = self.snr_db_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::invalid(format!("bad SNR range [{lo}, {hi}]")));
        }
        Ok(())
    }

    /// Window length in samples, `round(window_seconds · rate)`.
    pub fn window_samples(&self, rate: u32) -> usize {
        libm::round(self.window_seconds * rate as f64) as usize
    }
}

/// Impulse responses and noise recordings to draw from.
#[derive(Clone, Debug, Default)]
pub struct AugmentPools {
    pub rir: Vec<Vec<f32>>,
    pub noise: Vec<Vec<f32>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Technique {
    Speed,
    Rir,
    Noise,
}

impl Technique {
    pub const ALL: [Technique; 3] = [Technique::Speed, Technique::Rir, Technique::Noise];

    pub fn name(self) -> &'static str {
        match self {
            Technique::Speed => "speed",
            Technique::Rir => "rir",
            Technique::Noise => "noise",
        }
    }
}

fn peak(w: &[f32]) -> f32 {
    w.iter().fold(0.0f32, |m, x| m.max(x.abs()))
}

fn power(w: &[f32]) -> f64 {
    w.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / w.len() as f64
}

/// Repeats `w` end to end and truncates to `len`.
fn tile(w: &[f32], len: usize) -> Vec<f32> {
    w.iter().copied().cycle().take(len).collect()
}

/// Fixed-length window: a uniformly placed contiguous crop of longer inputs,
/// repetition padding of shorter ones.
pub fn crop_or_pad<R: Rng + ?Sized>(w: &[f32], target: usize, rng: &mut R) -> Result<Vec<f32>> {
    if w.is_empty() {
        return Err(Error::invalid("cannot crop or pad an empty waveform"));
    }
    if w.len() > target {
        let start = rng.random_range(0..=w.len() - target);
        Ok(w[start..start + target].to_vec())
    } else {
        Ok(tile(w, target))
    }
}

/// Output length of [`speed_perturb`] for `n` input samples.
pub fn speed_output_len(n: usize, factor: f64) -> usize {
    libm::round(n as f64 / factor) as usize
}

/// Linear-interpolation resampling of the time axis: duration scales by
/// `1/factor` and so do all frequencies by `factor`.
pub fn speed_perturb(w: &[f32], factor: f64) -> Result<Vec<f32>> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::invalid(format!("speed factor {factor} must be positive")));
    }
    if w.is_empty() {
        return Err(Error::invalid("cannot resample an empty waveform"));
    }
    let last = w.len() - 1;
    Ok((0..speed_output_len(w.len(), factor))
        .map(|i| {
            let pos = i as f64 * factor;
            let i0 = (libm::floor(pos) as usize).min(last);
            let frac = pos - i0 as f64;
            if i0 == last || frac <= 0.0 {
                w[i0]
            } else {
                let frac = frac as f32;
                w[i0] * (1.0 - frac) + w[i0 + 1] * frac
            }
        })
        .collect())
}

/// Convolution with `rir`, truncated to the input length and rescaled to
/// the input's peak amplitude.
pub fn apply_rir(w: &[f32], rir: &[f32]) -> Result<Vec<f32>> {
    if rir.iter().all(|&x| x == 0.0) {
        return Err(Error::invalid("impulse response is empty or all zero"));
    }
    let mut out = alloc::vec![0.0f32; w.len()];
    for (k, &h) in rir.iter().enumerate() {
        if h == 0.0 {
            continue;
        }
        for (o, &x) in out.iter_mut().skip(k).zip(w) {
            *o += h * x;
        }
    }
    let (p_in, p_out) = (peak(w), peak(&out));
    if p_out > 0.0 {
        let gain = p_in / p_out;
        out.iter_mut().for_each(|x| *x *= gain);
    }
    Ok(out)
}

/// Noise gain that puts `noise` at `snr_db` below `signal` in power.
pub fn noise_scale(signal: &[f32], noise: &[f32], snr_db: f64) -> Result<f64> {
    let ps = power(signal);
    if ps == 0.0 {
        return Err(Error::invalid("signal has zero power"));
    }
    let pn = power(noise);
    if pn == 0.0 {
        return Err(Error::invalid("noise has zero power"));
    }
    Ok(libm::sqrt(ps / (pn * libm::pow(10.0, snr_db / 10.0))))
}

/// Mixes in `noise` (cropped at a random offset or tiled to the input
/// length) at exactly `snr_db`.
pub fn add_noise<R: Rng + ?Sized>(w: &[f32], noise: &[f32], snr_db: f64, rng: &mut R) -> Result<Vec<f32>> {
    if w.is_empty() || noise.is_empty() {
        return Err(Error::invalid("signal and noise must be nonempty"));
    }
    if !snr_db.is_finite() {
        return Err(Error::invalid(format!("SNR {snr_db} dB must be finite")));
    }
    let segment = crop_or_pad(noise, w.len(), rng)?;
    let scale = noise_scale(w, &segment, snr_db)?;
    Ok(w.iter()
        .zip(&segment)
        .map(|(&x, &n)| (x as f64 + scale * n as f64) as f32)
        .collect())
}

/// With probability `apply_prob`, one technique chosen uniformly.
pub fn choose_technique<R: Rng + ?Sized>(policy: &AugmentPolicy, rng: &mut R) -> Option<Technique> {
    if rng.random::<f64>() < policy.apply_prob {
        Some(Technique::ALL[rng.random_range(0..Technique::ALL.len())])
    } else {
        None
    }
}

fn pick<'a, R: Rng + ?Sized>(pool: &'a [Vec<f32>], what: &str, rng: &mut R) -> Result<&'a [f32]> {
    if pool.is_empty() {
        return Err(Error::invalid(format!("{what} pool is empty")));
    }
    Ok(&pool[rng.random_range(0..pool.len())])
}

/// Training mode crops or pads to the window and then maybe applies one
/// technique; evaluation mode returns the input unchanged.
pub fn augment<R: Rng + ?Sized>(
    w: &[f32],
    policy: &AugmentPolicy,
    pools: &AugmentPools,
    rate: u32,
    rng: &mut R,
    training: bool,
) -> Result<(Vec<f32>, Option<Technique>)> {
    if !training {
        return Ok((w.to_vec(), None));
    }
    policy.validate()?;
    let target = policy.window_samples(rate);
    let cropped = crop_or_pad(w, target, rng)?;
    let technique = choose_technique(policy, rng);
    let out = match technique {
        None => cropped,
        Some(Technique::Speed) => {
            let factor = policy.speed_factors[rng.random_range(0..policy.speed_factors.len())];
            crop_or_pad(&speed_perturb(&cropped, factor)?, target, rng)?
        }
        Some(Technique::Rir) => apply_rir(&cropped, pick(&pools.rir, "RIR", rng)?)?,
        Some(Technique::Noise) => {
            let noise = pick(&pools.noise, "noise", rng)?;
            let [lo, hi] = policy.snr_db_range;
            let snr = if lo == hi { lo } else { rng.random_range(lo..=hi) };
            if power(&cropped) == 0.0 {
                // Silence has no level to mix against.
                cropped
            } else {
                add_noise(&cropped, noise, snr, rng)?
            }
        }
    };
    Ok((out, technique))
}
