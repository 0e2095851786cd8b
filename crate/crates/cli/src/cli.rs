//! Argument parsing and dispatch.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::commands::{self, EvalArgs, TrainArgs};
use crate::config::RunConfig;
use crate::formats::FormatError;

#[derive(Debug, Parser)]
#[command(name = "dmha", version, about = "Multimodal speech emotion recognition with double multi-head attention")]
pub struct Cli {
    /// Run configuration (JSON). Defaults apply to every missing field.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, or output file for `eval` and `tune-thresholds`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic train/validation dataset.
    Synth,
    /// Compute log-mel feature files from WAV entries.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        /// Waveform statistics from a previous `extract` (stats.json).
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Write training-mode augmented copies of WAV entries.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train a model and keep the best validation checkpoint.
    Train {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Train from WAV entries with on-line augmentation.
        #[arg(long)]
        from_wav: bool,
    },
    /// Tune per-class decision thresholds and store them in the checkpoint.
    TuneThresholds {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest to tune on; defaults to the configured split.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "train")]
        on: Split,
    },
    /// Score one checkpoint or a three-model hard-voting ensemble.
    Eval {
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        /// Ensemble description (JSON with `members` and optional `tie_breaker`).
        #[arg(long)]
        ensemble: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// Ignore stored thresholds and predict the argmax.
        #[arg(long)]
        raw: bool,
    },
    /// Per-utterance predictions as JSON lines.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        raw: bool,
    },
    /// Finite-difference gradient check of both attention variants.
    Gradcheck {
        /// Keep dropout active (the check refuses to run).
        #[arg(long)]
        dropout_on: bool,
    },
    /// Print or validate the run configuration.
    Config {
        /// Print the effective configuration with every default filled in.
        #[arg(long)]
        dump: bool,
    },
}

fn require_out<'a>(out: &'a Option<PathBuf>, cmd: &str) -> Result<&'a Path> {
    out.as_deref().with_context(|| format!("`{cmd}` needs --out"))
}

impl Cli {
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    /// Runs the command and returns the JSON lines to print.
    pub fn run(&self) -> Result<Vec<Value>> {
        let cfg = self.run_config()?;
        let out = &self.out;
        let one = |v: Value| Ok(vec![v]);
        match &self.command {
            Command::Synth => one(commands::synth(&cfg, require_out(out, "synth")?)?),
            Command::Extract { manifest, stats } => one(commands::extract(&cfg, manifest, stats.as_deref(), require_out(out, "extract")?)?),
            Command::Augment { manifest } => one(commands::augment_batch(&cfg, manifest, require_out(out, "augment")?)?),
            Command::Train { train, val, from_wav } => {
                let args = TrainArgs {
                    train: train.as_deref(),
                    val: val.as_deref(),
                    from_wav: *from_wav,
                };
                one(commands::train(&cfg, &args, require_out(out, "train")?)?)
            }
            Command::TuneThresholds { checkpoint, manifest, on } => {
                let (configured, field) = match on {
                    Split::Train => (&cfg.data.train_manifest, "train_manifest"),
                    Split::Val => (&cfg.data.val_manifest, "val_manifest"),
                };
                let Some(manifest) = manifest.as_ref().or(configured.as_ref()) else {
                    return Err(dmha_core::Error::InvalidArgument(format!("no manifest to tune on: pass --manifest or set data.{field}")).into());
                };
                one(commands::tune(checkpoint, manifest, out.as_deref())?)
            }
            Command::Eval { checkpoints, ensemble, manifest, raw } => {
                let args = EvalArgs {
                    checkpoints,
                    ensemble: ensemble.as_deref(),
                    manifest,
                    raw: *raw,
                };
                one(commands::eval(&args, out.as_deref())?)
            }
            Command::Predict { checkpoint, manifest, raw } => commands::predict(checkpoint, manifest, *raw),
            Command::Gradcheck { dropout_on } => {
                let summary = commands::gradcheck(cfg.seed, *dropout_on)?;
                if !summary.pass {
                    bail!(GradcheckFailed(serde_json::to_value(&summary)?));
                }
                one(serde_json::to_value(summary)?)
            }
            Command::Config { dump } => {
                cfg.validate()?;
                if *dump {
                    one(serde_json::to_value(&cfg)?)
                } else {
                    one(json!({ "command": "config", "valid": true }))
                }
            }
        }
    }
}

/// Gradient check ran but exceeded the tolerance; carries the full report.
#[derive(Debug, thiserror::Error)]
#[error("gradient check exceeded tolerance")]
pub struct GradcheckFailed(pub Value);

/// Single-line JSON description of a failure.
pub fn error_json(err: &anyhow::Error) -> Value {
    let kind = if let Some(e) = err.downcast_ref::<FormatError>() {
        e.kind()
    } else if let Some(e) = err.downcast_ref::<dmha_core::Error>() {
        e.kind()
    } else if err.downcast_ref::<GradcheckFailed>().is_some() {
        "gradcheck_failed"
    } else if err.downcast_ref::<serde_json::Error>().is_some() {
        "json"
    } else if err.downcast_ref::<std::io::Error>().is_some() {
        "io"
    } else {
        "error"
    };
    let mut v = json!({ "error": kind, "message": format!("{err:#}") });
    if let Some(GradcheckFailed(report)) = err.downcast_ref::<GradcheckFailed>() {
        v["report"] = report.clone();
    }
    v
}
