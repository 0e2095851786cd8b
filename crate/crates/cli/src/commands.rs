//! Implementations of the `dmha` subcommands. Each returns JSON values that
//! the binary prints one per line.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use dmha_core::augment::{augment, AugmentPools};
use dmha_core::features::{normalize_waveform, synth_dataset, MelExtractor, WaveformStats};
use dmha_core::gradcheck::{check_model, ModelGradReport};
use dmha_core::metrics::{argmax, ConfusionMatrix};
use dmha_core::postprocess::{hard_vote, predict_all, tune_thresholds, EnsembleSpec, ThresholdSet};
use dmha_core::rng::{purpose, stream};
use dmha_core::train::{train_loop, Waveform, WaveformDataset};
use dmha_core::{AttentionVariant, Checkpoint, DmhaModel, Emotion, FeatureRecord, NUM_CLASSES};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::formats::{load_checkpoint, save_checkpoint, FeatureArray};
use crate::manifest::{Manifest, ManifestEntry};
use crate::wav;

/// Maximum relative gradient error accepted by `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

const EVAL_BATCH: usize = 64;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Writes the synthetic train (split 0) and validation (split 1) sets as
/// feature files plus `train.jsonl` / `val.jsonl`.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let features = out.join("features");
    create_dir(&features)?;
    let mut counts = BTreeMap::new();
    for (split, name) in [(0u64, "train"), (1, "val")] {
        let records = synth_dataset(&cfg.data.synth, cfg.seed, split)?;
        let mut entries = Vec::with_capacity(records.len());
        for rec in &records {
            let acoustic = PathBuf::from("features").join(format!("{}.acoustic.dmhf", rec.utterance_id));
            FeatureArray::from_tensor(&rec.acoustic)?.save(&out.join(&acoustic))?;
            let text = PathBuf::from("features").join(format!("{}.text.dmhf", rec.utterance_id));
            let text_array = match &rec.text {
                Some(t) => FeatureArray::from_tensor(t)?,
                None => FeatureArray::empty_text(rec.dim())?,
            };
            text_array.save(&out.join(&text))?;
            entries.push(ManifestEntry {
                id: rec.utterance_id.clone(),
                acoustic_path: Some(acoustic),
                text_path: Some(text),
                wav_path: None,
                label: rec.label,
            });
        }
        Manifest::new(out, entries)?.save(&out.join(format!("{name}.jsonl")))?;
        counts.insert(name, records.len());
    }
    Ok(json!({
        "command": "synth",
        "train_manifest": out.join("train.jsonl"),
        "val_manifest": out.join("val.jsonl"),
        "records": counts,
    }))
}

/// Log-mel features for every WAV entry of `manifest`, written as
/// single-layer feature files under `out`. Waveforms are normalized with
/// `stats` when given, otherwise with statistics of this manifest (saved to
/// `out/stats.json` for reuse on other splits).
pub fn extract(cfg: &RunConfig, manifest: &Path, stats: Option<&Path>, out: &Path) -> Result<Value> {
    let m = Manifest::load(manifest)?;
    let waves = m.load_waveforms()?;
    let stats = match stats {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => WaveformStats::from_corpus(waves.iter().map(|w| w.samples.as_slice()))?,
    };
    let extractor = MelExtractor::new(cfg.data.mel)?;
    let features = out.join("features");
    create_dir(&features)?;
    let mut entries = Vec::with_capacity(waves.len());
    for (w, e) in waves.iter().zip(&m.entries) {
        let mel = extractor.extract(&normalize_waveform(&w.samples, stats)?).with_context(|| format!("features of `{}`", w.id))?;
        let rel = PathBuf::from("features").join(format!("{}.mel.dmhf", w.id));
        FeatureArray::from_tensor(&mel)?.save(&out.join(&rel))?;
        entries.push(ManifestEntry {
            id: e.id.clone(),
            acoustic_path: Some(rel),
            text_path: e.text_path.as_ref().map(|p| absolute(&m.resolve(p))).transpose()?,
            wav_path: e.wav_path.as_ref().map(|p| absolute(&m.resolve(p))).transpose()?,
            label: e.label,
        });
    }
    let out_manifest = out.join("manifest.jsonl");
    Manifest::new(out, entries)?.save(&out_manifest)?;
    write_json(&out.join("stats.json"), &stats)?;
    Ok(json!({
        "command": "extract",
        "manifest": out_manifest,
        "records": m.len(),
        "n_mels": cfg.data.mel.n_mels,
        "stats": stats,
    }))
}

fn absolute(p: &Path) -> Result<PathBuf> {
    fs::canonicalize(p).with_context(|| format!("resolving {}", p.display()))
}

fn load_pools(cfg: &RunConfig) -> Result<AugmentPools> {
    Ok(AugmentPools {
        rir: cfg.data.rir_paths.iter().map(|p| wav::read(p)).collect::<Result<_>>()?,
        noise: cfg.data.noise_paths.iter().map(|p| wav::read(p)).collect::<Result<_>>()?,
    })
}

/// Training-mode augmentation of every WAV entry; writes the results under
/// `out/wav` with a matching manifest.
pub fn augment_batch(cfg: &RunConfig, manifest: &Path, out: &Path) -> Result<Value> {
    let m = Manifest::load(manifest)?;
    let pools = load_pools(cfg)?;
    let wav_dir = out.join("wav");
    create_dir(&wav_dir)?;
    let mut techniques: BTreeMap<&str, usize> = BTreeMap::new();
    let mut entries = Vec::with_capacity(m.len());
    for (i, w) in m.load_waveforms()?.iter().enumerate() {
        let mut rng = stream(cfg.seed, purpose::AUGMENT, i as u64);
        let (samples, technique) = augment(&w.samples, &cfg.augment, &pools, wav::SAMPLE_RATE, &mut rng, true)
            .with_context(|| format!("augmenting `{}`", w.id))?;
        *techniques.entry(technique.map_or("none", |t| t.name())).or_default() += 1;
        let rel = PathBuf::from("wav").join(format!("{}.wav", w.id));
        wav::write(&out.join(&rel), &samples)?;
        entries.push(ManifestEntry {
            id: w.id.clone(),
            acoustic_path: None,
            text_path: None,
            wav_path: Some(rel),
            label: w.label,
        });
    }
    let out_manifest = out.join("manifest.jsonl");
    Manifest::new(out, entries)?.save(&out_manifest)?;
    Ok(json!({ "command": "augment", "manifest": out_manifest, "records": m.len(), "techniques": techniques }))
}

fn manifest_path(flag: Option<&Path>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    match (flag, configured) {
        (Some(p), _) => Ok(p.to_path_buf()),
        (None, Some(p)) => Ok(p.clone()),
        (None, None) => Err(dmha_core::Error::InvalidArgument(format!("no {what} manifest: pass --{what} or set data.{what}_manifest")).into()),
    }
}

pub struct TrainArgs<'a> {
    pub train: Option<&'a Path>,
    pub val: Option<&'a Path>,
    /// Train from `wav_path` entries with on-line augmentation and mel
    /// features instead of precomputed feature files.
    pub from_wav: bool,
}

/// Trains one model; writes `out/model.dmhc` and the per-epoch log
/// `out/run.jsonl`.
pub fn train(cfg: &RunConfig, args: &TrainArgs, out: &Path) -> Result<Value> {
    let train_m = Manifest::load(&manifest_path(args.train, &cfg.data.train_manifest, "train")?)?;
    let val_m = Manifest::load(&manifest_path(args.val, &cfg.data.val_manifest, "val")?)?;
    create_dir(out)?;
    let mut log = BufWriter::new(File::create(out.join("run.jsonl"))?);
    let mut log_error = None;
    let mut on_epoch = |m: &dmha_core::train::EpochMetrics| {
        let r = serde_json::to_writer(&mut log, m).map_err(anyhow::Error::from).and_then(|_| {
            log.write_all(b"\n")?;
            log.flush()?;
            Ok(())
        });
        if let Err(e) = r {
            log_error.get_or_insert(e);
        }
    };

    let mut model_cfg = cfg.model.clone();
    let mut extra = json!({});
    let outcome = if args.from_wav {
        let mut train_w = train_m.load_waveforms()?;
        let mut val_w = val_m.load_waveforms()?;
        let stats = WaveformStats::from_corpus(train_w.iter().map(|w| w.samples.as_slice()))?;
        for w in train_w.iter_mut().chain(val_w.iter_mut()) {
            w.samples = normalize_waveform(&w.samples, stats)?;
        }
        write_json(&out.join("stats.json"), &stats)?;
        extra = json!({ "stats": stats });
        let dataset = |items: Vec<Waveform>| -> Result<WaveformDataset> {
            Ok(WaveformDataset {
                items,
                policy: cfg.augment.clone(),
                pools: load_pools(cfg)?,
                extractor: MelExtractor::new(cfg.data.mel)?,
            })
        };
        let (train_set, val_set) = (dataset(train_w)?, dataset(val_w)?);
        model_cfg.dim = cfg.data.mel.n_mels;
        model_cfg.acoustic_layers = 1;
        let mut model = DmhaModel::new(model_cfg.clone(), &mut stream(cfg.seed, purpose::INIT, 0))?;
        train_loop(&mut model, &train_set, &val_set, &cfg.train, cfg.seed, &mut on_epoch)?
    } else {
        let train_r = train_m.load_records()?;
        let val_r = val_m.load_records()?;
        ensure!(!train_r.is_empty(), "training manifest is empty");
        model_cfg.dim = train_r[0].dim();
        model_cfg.acoustic_layers = train_r[0].layers();
        let mut model = DmhaModel::new(model_cfg.clone(), &mut stream(cfg.seed, purpose::INIT, 0))?;
        train_loop(&mut model, train_r.as_slice(), val_r.as_slice(), &cfg.train, cfg.seed, &mut on_epoch)?
    };
    if let Some(e) = log_error {
        return Err(e.context("writing run log"));
    }
    let ckpt_path = out.join("model.dmhc");
    save_checkpoint(&ckpt_path, &outcome.checkpoint)?;
    let mut summary = json!({
        "command": "train",
        "checkpoint": ckpt_path,
        "run_log": out.join("run.jsonl"),
        "epochs_run": outcome.history.len(),
        "best_epoch": outcome.checkpoint.meta.epoch,
        "val_macro_f1": outcome.checkpoint.meta.val_macro_f1,
        "final_lr": outcome.history.last().map(|m| m.lr),
        "model": model_cfg,
    });
    if let (Value::Object(s), Value::Object(e)) = (&mut summary, extra) {
        s.extend(e);
    }
    Ok(summary)
}

fn probabilities(model: &DmhaModel<f32>, records: &[FeatureRecord]) -> Result<Vec<[f32; NUM_CLASSES]>> {
    Ok(model.predict_proba(records, EVAL_BATCH)?)
}

/// Tunes per-class thresholds on `manifest` and stores them in the
/// checkpoint (in place unless `out` is given).
pub fn tune(checkpoint: &Path, manifest: &Path, out: Option<&Path>) -> Result<Value> {
    let mut ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.to_model()?;
    let m = Manifest::load(manifest)?;
    let probs = probabilities(&model, &m.load_records()?)?;
    let truth = m.labels();
    let untuned = ConfusionMatrix::new(&predict_all(&probs, &ThresholdSet::zeros()), &truth, NUM_CLASSES)?.macro_f1();
    let thresholds = tune_thresholds(&probs, &truth)?;
    let tuned = ConfusionMatrix::new(&predict_all(&probs, &thresholds), &truth, NUM_CLASSES)?.macro_f1();
    ckpt.meta.thresholds = Some(thresholds);
    let target = out.unwrap_or(checkpoint);
    save_checkpoint(target, &ckpt)?;
    Ok(json!({
        "command": "tune-thresholds",
        "checkpoint": target,
        "thresholds": thresholds.0,
        "macro_f1_untuned": untuned,
        "macro_f1_tuned": tuned,
    }))
}

/// Ensemble description file: member checkpoint paths (relative to the
/// file) and an optional tie-breaker index. Without one, the member with
/// the best stored validation macro-F1 breaks ties.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleFile {
    pub members: Vec<PathBuf>,
    #[serde(default)]
    pub tie_breaker: Option<usize>,
}

impl EnsembleFile {
    pub fn load(path: &Path) -> Result<(Vec<PathBuf>, Option<usize>)> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let members = file.members.iter().map(|p| if p.is_absolute() { p.clone() } else { base.join(p) }).collect();
        Ok((members, file.tie_breaker))
    }
}

struct Member {
    path: PathBuf,
    ckpt: Checkpoint,
}

impl Member {
    fn predict(&self, records: &[FeatureRecord], raw: bool) -> Result<(Vec<[f32; NUM_CLASSES]>, Vec<usize>)> {
        let probs = probabilities(&self.ckpt.to_model()?, records)?;
        let labels = if raw {
            probs.iter().map(|p| argmax(p)).collect()
        } else {
            predict_all(&probs, &self.ckpt.thresholds())
        };
        Ok((probs, labels))
    }
}

fn load_members(paths: &[PathBuf]) -> Result<Vec<Member>> {
    paths
        .iter()
        .map(|p| {
            Ok(Member {
                path: p.clone(),
                ckpt: load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display()))?,
            })
        })
        .collect()
}

fn ensemble_predictions(members: &[Member], tie_breaker: Option<usize>, records: &[FeatureRecord], raw: bool) -> Result<(Vec<usize>, Option<EnsembleSpec>)> {
    match members.len() {
        1 => Ok((members[0].predict(records, raw)?.1, None)),
        3 => {
            let names = members.iter().map(|m| m.path.display().to_string()).collect();
            let spec = match tie_breaker {
                Some(t) => EnsembleSpec::new(names, t)?,
                None => EnsembleSpec::with_best_member(names, &members.iter().map(|m| m.ckpt.meta.val_macro_f1).collect::<Vec<_>>())?,
            };
            let votes = members.iter().map(|m| m.predict(records, raw).map(|p| p.1)).collect::<Result<Vec<_>>>()?;
            let preds = (0..records.len()).map(|i| hard_vote([votes[0][i], votes[1][i], votes[2][i]], spec.tie_breaker)).collect();
            Ok((preds, Some(spec)))
        }
        n => return Err(dmha_core::Error::InvalidArgument(format!("evaluation takes 1 or 3 checkpoints, got {n}")).into()),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub command: String,
    pub members: Vec<PathBuf>,
    pub tie_breaker: Option<usize>,
    pub thresholds_applied: bool,
    pub records: usize,
    pub macro_f1: f64,
    pub per_class: Vec<ClassReport>,
    /// `confusion[truth][pred]`.
    pub confusion: Vec<Vec<u64>>,
}

pub struct EvalArgs<'a> {
    pub checkpoints: &'a [PathBuf],
    pub ensemble: Option<&'a Path>,
    pub manifest: &'a Path,
    /// Plain argmax, ignoring stored thresholds.
    pub raw: bool,
}

pub fn eval(args: &EvalArgs, out: Option<&Path>) -> Result<Value> {
    let (paths, tie) = match args.ensemble {
        Some(p) => {
            ensure!(args.checkpoints.is_empty(), "pass either --checkpoint or --ensemble, not both");
            EnsembleFile::load(p)?
        }
        None => (args.checkpoints.to_vec(), None),
    };
    let members = load_members(&paths)?;
    let m = Manifest::load(args.manifest)?;
    let records = m.load_records()?;
    let (preds, spec) = ensemble_predictions(&members, tie, &records, args.raw)?;
    let cm = ConfusionMatrix::new(&preds, &m.labels(), NUM_CLASSES)?;
    let report = EvalReport {
        command: "eval".into(),
        members: paths,
        tie_breaker: spec.map(|s| s.tie_breaker),
        thresholds_applied: !args.raw && members.iter().any(|m| m.ckpt.meta.thresholds.is_some()),
        records: records.len(),
        macro_f1: cm.macro_f1(),
        per_class: Emotion::ALL
            .iter()
            .map(|e| {
                let s = cm.class_scores(e.index());
                ClassReport {
                    class: e.name().into(),
                    precision: s.precision,
                    recall: s.recall,
                    f1: s.f1,
                    support: s.support,
                }
            })
            .collect(),
        confusion: cm.counts().to_vec(),
    };
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    Ok(serde_json::to_value(report)?)
}

/// One JSON line per utterance with its label and class probabilities.
pub fn predict(checkpoint: &Path, manifest: &Path, raw: bool) -> Result<Vec<Value>> {
    let member = load_members(&[checkpoint.to_path_buf()])?.remove(0);
    let m = Manifest::load(manifest)?;
    let (probs, labels) = member.predict(&m.load_records()?, raw)?;
    Ok(m.entries
        .iter()
        .zip(probs.iter().zip(labels))
        .map(|(e, (p, label))| json!({ "id": e.id, "label": label, "emotion": Emotion::ALL[label].name(), "probs": p }))
        .collect())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradcheckSummary {
    pub command: String,
    pub pass: bool,
    pub tolerance: f64,
    pub seed: u64,
    pub variants: Vec<ModelGradReport>,
}

pub fn gradcheck(seed: u64, dropout_on: bool) -> Result<GradcheckSummary> {
    let variants = [AttentionVariant::Standard, AttentionVariant::Subvector]
        .into_iter()
        .map(|v| check_model(v, seed, dropout_on))
        .collect::<dmha_core::Result<Vec<_>>>()?;
    Ok(GradcheckSummary {
        command: "gradcheck".into(),
        pass: variants.iter().all(|r| r.max_rel_err() < GRADCHECK_TOLERANCE),
        tolerance: GRADCHECK_TOLERANCE,
        seed,
        variants,
    })
}
