//! JSON-lines utterance manifests. Relative paths resolve against the
//! manifest's own directory.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use dmha_core::train::Waveform;
use dmha_core::{FeatureRecord, NUM_CLASSES};
use serde::{Deserialize, Serialize};

use crate::formats::FeatureArray;
use crate::wav;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub acoustic_path: Option<PathBuf>,
    pub text_path: Option<PathBuf>,
    pub wav_path: Option<PathBuf>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory relative paths are resolved against.
    pub base: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(base: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self { base: base.into(), entries };
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            ensure!(seen.insert(e.id.as_str()), "duplicate utterance id `{}`", e.id);
            ensure!(e.label < NUM_CLASSES, "utterance `{}` has label {} (expected 0..8)", e.id, e.label);
            ensure!(
                e.acoustic_path.is_some() || e.wav_path.is_some(),
                "utterance `{}` has neither acoustic_path nor wav_path",
                e.id
            );
        }
        Ok(())
    }

    /// Parses the file and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
            .collect::<Result<Vec<ManifestEntry>>>()?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::new(base, entries)?;
        for e in &m.entries {
            for p in [&e.acoustic_path, &e.text_path, &e.wav_path].into_iter().flatten() {
                let full = m.resolve(p);
                ensure!(full.is_file(), "utterance `{}` references missing file {}", e.id, full.display());
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        fs::write(path, out).with_context(|| format!("writing manifest {}", path.display()))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Reads each entry's feature files into a record.
    pub fn load_records(&self) -> Result<Vec<FeatureRecord>> {
        self.entries
            .iter()
            .map(|e| {
                let Some(acoustic) = &e.acoustic_path else {
                    bail!("utterance `{}` has no acoustic features (run `extract` first)", e.id);
                };
                let acoustic = FeatureArray::load(&self.resolve(acoustic))
                    .and_then(FeatureArray::into_acoustic)
                    .with_context(|| format!("acoustic features of `{}`", e.id))?;
                let text = match &e.text_path {
                    Some(p) => FeatureArray::load(&self.resolve(p))
                        .and_then(FeatureArray::into_text)
                        .with_context(|| format!("text features of `{}`", e.id))?,
                    None => None,
                };
                Ok(FeatureRecord::new(e.id.clone(), acoustic, text, e.label)?)
            })
            .collect()
    }

    /// Reads each entry's WAV file (16-bit mono at [`wav::SAMPLE_RATE`]).
    pub fn load_waveforms(&self) -> Result<Vec<Waveform>> {
        self.entries
            .iter()
            .map(|e| {
                let Some(p) = &e.wav_path else {
                    bail!("utterance `{}` has no wav_path", e.id);
                };
                Ok(Waveform {
                    id: e.id.clone(),
                    samples: wav::read(&self.resolve(p))?,
                    label: e.label,
                })
            })
            .collect()
    }
}
