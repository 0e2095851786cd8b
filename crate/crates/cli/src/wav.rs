//! 16-bit PCM mono WAV at 16 kHz; anything else is rejected.

use std::path::Path;

use anyhow::{ensure, Context, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Samples scaled to `[-1, 1)`.
pub fn read(path: &Path) -> Result<Vec<f32>> {
    let reader = hound::WavReader::open(path).with_context(|| format!("opening {}", path.display()))?;
    let spec = reader.spec();
    ensure!(
        spec.channels == 1 && spec.bits_per_sample == 16 && spec.sample_format == hound::SampleFormat::Int,
        "{}: expected 16-bit PCM mono, found {} channel(s) at {} bits",
        path.display(),
        spec.channels,
        spec.bits_per_sample
    );
    ensure!(
        spec.sample_rate == SAMPLE_RATE,
        "{}: expected {SAMPLE_RATE} Hz, found {} Hz",
        path.display(),
        spec.sample_rate
    );
    reader
        .into_samples::<i16>()
        .map(|s| Ok(s? as f32 / 32768.0))
        .collect::<Result<Vec<_>>>()
        .with_context(|| format!("reading samples of {}", path.display()))
}

/// Writes samples in `[-1, 1]`, clipping anything outside.
pub fn write(path: &Path, samples: &[f32]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).with_context(|| format!("creating {}", path.display()))?;
    for &s in samples {
        w.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)?;
    }
    w.finalize()?;
    Ok(())
}
