//! Batch command suite behind the `tdefect` binary.
//!
//! Each subcommand maps onto one library operation and writes everything
//! under `--out`. Failures surface as a single line
//! `error: <Kind>: <message>` with exit status 1; usage errors exit with 2.

use std::path::{Path, PathBuf};
use std::time::SystemTime;

use clap::{Args, Parser, Subcommand};
use log::warn;

use crate::config::{Overrides, RunConfig};
use crate::data_model::{validate_manifest, DegradationSpec, Manifest, Operation, Split};
use crate::degradation::degrade_corpus;
use crate::detector::{DetectorBundle, FrozenComponents};
use crate::error::{Error, Result};
use crate::evaluation::{
    ablation_run, cross_generator_from_manifest, evaluate_clips, robustness_eval, score_external, write_predictions,
    write_run_info, Cell, EvalReport, ReportMetadata, ReportRow,
};
use crate::ingestion::{assign_splits, load_video, ClipIndex, FrameCache};
use crate::local_branch::FramePredictor;
use crate::synthetic::build_synthetic_corpus;
use crate::training::{require_splits, train_detector, train_predictor_on_manifest, FeatureSet};
use crate::transcoder::Transcoder;

#[derive(Parser, Debug)]
#[command(name = "tdefect", version, about = "Detect AI-generated video from local and global temporal defects")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed for splits, initialization and shuffling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Upper bound on worker threads.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Frames between consecutive clip starts.
    #[arg(long)]
    pub stride: Option<usize>,
    /// Frames per clip.
    #[arg(long)]
    pub clip_length: Option<usize>,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        self.run_config_with(None)
    }

    fn run_config_with(&self, videos_per_class: Option<usize>) -> Result<RunConfig> {
        RunConfig::resolve(
            self.config.as_deref(),
            &Overrides {
                seed: self.seed,
                workers: self.workers,
                stride: self.stride,
                clip_length: self.clip_length,
                videos_per_class,
            },
        )
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render and encode the synthetic benchmark corpus.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Real videos, and fakes per defect family.
        #[arg(long)]
        videos_per_class: Option<usize>,
    },
    /// Assign video-level splits, validate the manifest and index clips.
    Ingest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Also store every decoded frame as PNG under `<out>/frames`.
        #[arg(long)]
        cache_frames: bool,
    },
    /// Produce degraded copies of every clean video.
    Degrade {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Restrict to one operation (BIT_ERROR, H265_ABR, H265_CRF).
        #[arg(long)]
        operation: Option<Operation>,
        /// Restrict to one severity level (1, 2 or 3).
        #[arg(long)]
        severity: Option<u8>,
    },
    /// Train the frame predictor on REAL training videos.
    TrainPredictor {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train the detector with a frozen predictor.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Frame predictor checkpoint from `train-predictor`.
        #[arg(long)]
        predictor: Option<PathBuf>,
    },
    /// Score the TEST split with a trained detector.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train per generator and test on every generator.
    CrossEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        predictor: Option<PathBuf>,
    },
    /// Evaluate a clean-trained detector on degraded TEST videos.
    Robustness {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output manifest of `degrade`, including the clean baseline.
        #[arg(long)]
        degraded_manifest: PathBuf,
    },
    /// Train and test the global-only, concatenation and fusion variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        predictor: Option<PathBuf>,
        /// Comma-separated training seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Accuracy of an externally produced per-clip probability dump.
    ScoreExternal {
        #[command(flatten)]
        common: Common,
        /// JSON lines with clip_id, label and probability.
        #[arg(long)]
        predictions: PathBuf,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth { common, .. }
            | Command::Ingest { common, .. }
            | Command::Degrade { common, .. }
            | Command::TrainPredictor { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::CrossEval { common, .. }
            | Command::Robustness { common, .. }
            | Command::Ablate { common, .. }
            | Command::ScoreExternal { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Ingest { .. } => "ingest",
            Command::Degrade { .. } => "degrade",
            Command::TrainPredictor { .. } => "train-predictor",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::CrossEval { .. } => "cross-eval",
            Command::Robustness { .. } => "robustness",
            Command::Ablate { .. } => "ablate",
            Command::ScoreExternal { .. } => "score-external",
        }
    }
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    let m = Manifest::load(path)?;
    for v in validate_manifest(&m) {
        warn!("{}: {v}", path.display());
    }
    Ok(m)
}

fn frozen_components(predictor: Option<&Path>, cfg: &RunConfig) -> Result<FrozenComponents> {
    let path = predictor.ok_or_else(|| Error::FrozenComponentMissing("frame predictor (pass --predictor)".into()))?;
    FrozenComponents::new(FramePredictor::load(path)?, cfg.embedder.clone())
}

fn write_json<T: serde::Serialize>(path: PathBuf, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Run one parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let started = SystemTime::now();
    let command = cli.command;
    let out = command.common().out.clone();
    std::fs::create_dir_all(&out)?;
    let cfg = match &command {
        Command::Synth { common, videos_per_class } => common.run_config_with(*videos_per_class)?,
        other => other.common().run_config()?,
    };
    cfg.echo(&out)?;
    let transcoder = || Transcoder::discover(&cfg.transcoder);
    match &command {
        Command::Synth { .. } => {
            let corpus = build_synthetic_corpus(&cfg.synth, &out, &transcoder()?, cfg.workers)?;
            for w in &corpus.warnings {
                warn!("{w}");
            }
            println!(
                "{} videos, manifest {}, corpus hash {}",
                corpus.manifest.records.len(),
                corpus.manifest_path.display(),
                corpus.hash
            );
        }
        Command::Ingest {
            manifest, cache_frames, ..
        } => {
            let input = load_manifest(manifest)?;
            let (m, warnings) = assign_splits(input.records.clone(), input.split_ratio, cfg.seed)?;
            // the output manifest lives elsewhere, so pin record paths
            let mut m = m.with_root(&input.root);
            for i in 0..m.records.len() {
                m.records[i].path = std::path::absolute(m.resolve(&m.records[i]))?;
            }
            for w in &warnings {
                warn!("{w}");
            }
            let violations = validate_manifest(&m);
            if !violations.is_empty() {
                return Err(Error::Manifest(violations.join("; ")));
            }
            m.save(out.join("manifest.jsonl"))?;
            let index = ClipIndex::build(&m.records, cfg.train.clip_length, cfg.train.stride)?;
            write_json(out.join("clips.json"), &index)?;
            if *cache_frames {
                let t = transcoder()?;
                let cache = FrameCache::new(out.join("frames"));
                for r in &m.records {
                    cache.store(&r.source_id(), &load_video(&t, &m, r)?.frames)?;
                }
            }
            println!(
                "train {} / val {} / test {} videos, {} clips",
                m.count(Split::Train),
                m.count(Split::Val),
                m.count(Split::Test),
                index.len()
            );
        }
        Command::Degrade {
            manifest,
            operation,
            severity,
            ..
        } => {
            let m = load_manifest(manifest)?;
            let mut template = cfg.degrade.clone();
            if let Some(op) = operation {
                template.operations = vec![*op];
            }
            if let Some(sev) = severity {
                DegradationSpec::new(template.operations[0], *sev)?;
                template.severities = vec![*sev];
            }
            let outcome = degrade_corpus(&m, &template, &out, &transcoder()?, cfg.workers)?;
            outcome.manifest.save(out.join("manifest.jsonl"))?;
            write_json(out.join("failures.json"), &outcome.failures)?;
            println!(
                "{} records written, {} failures",
                outcome.manifest.records.len(),
                outcome.failures.len()
            );
        }
        Command::TrainPredictor { manifest, .. } => {
            let m = load_manifest(manifest)?;
            let (predictor, report) =
                train_predictor_on_manifest(&m, &cfg.predictor, &transcoder()?, cfg.train.clip_length, cfg.workers)?;
            predictor.save(out.join("predictor.tdck"))?;
            write_json(out.join("predictor_report.json"), &report)?;
            println!(
                "held-out error {:.5} (copy-last {:.5})",
                report.held_out_mae.iter().copied().fold(f64::INFINITY, f64::min),
                report.copy_last_mae
            );
        }
        Command::Train { manifest, predictor, .. } => {
            let m = load_manifest(manifest)?;
            require_splits(&m, &[Split::Train, Split::Val])?;
            let frozen = frozen_components(predictor.as_deref(), &cfg)?;
            let outcome = train_detector(&m, &cfg.train, &frozen, &transcoder()?, cfg.workers)?;
            outcome.bundle.save(out.join("detector.tdck"))?;
            write_json(out.join("train_log.json"), &outcome.log)?;
            write_json(out.join("failures.json"), &outcome.failures)?;
            println!(
                "best val accuracy {:.2}% at epoch {}",
                outcome.log.best_val_accuracy, outcome.log.best_epoch
            );
        }
        Command::Eval { manifest, checkpoint, .. } => {
            let m = load_manifest(manifest)?.filtered(|r| r.split == Split::Test);
            let bundle = DetectorBundle::load(checkpoint)?;
            let features =
                FeatureSet::extract(&m, &bundle.frozen, &transcoder()?, bundle.clip_length, bundle.stride, cfg.workers)?;
            let eval = evaluate_clips(&bundle.detector, &features.clips)?;
            write_predictions(out.join("predictions.jsonl"), &eval.predictions)?;
            let report = single_value_report(
                "Clip-level detection accuracy (%)",
                "TEST",
                eval.accuracy,
                &bundle.detector.config,
                cfg.seed,
                eval.predictions.len(),
                &features.failures,
            )?;
            report.save(&out, "eval")?;
            print!("{}", report.to_text());
        }
        Command::CrossEval { manifest, predictor, .. } => {
            let m = load_manifest(manifest)?;
            let frozen = frozen_components(predictor.as_deref(), &cfg)?;
            let report = cross_generator_from_manifest(&m, &cfg.train, &frozen, &transcoder()?, cfg.workers)?;
            report.save(&out, "cross_generator")?;
            print!("{}", report.to_text());
        }
        Command::Robustness {
            checkpoint,
            degraded_manifest,
            ..
        } => {
            let m = load_manifest(degraded_manifest)?;
            let bundle = DetectorBundle::load(checkpoint)?;
            let report = robustness_eval(&bundle, &m, &transcoder()?, cfg.workers, cfg.seed)?;
            report.save(&out, "robustness")?;
            print!("{}", report.to_text());
        }
        Command::Ablate {
            manifest,
            predictor,
            seeds,
            ..
        } => {
            let m = load_manifest(manifest)?;
            require_splits(&m, &Split::ALL)?;
            let frozen = frozen_components(predictor.as_deref(), &cfg)?;
            let features =
                FeatureSet::extract(&m, &frozen, &transcoder()?, cfg.train.clip_length, cfg.train.stride, cfg.workers)?;
            let report = ablation_run(&features, &cfg.train, seeds)?;
            report.save(&out, "ablation")?;
            print!("{}", report.to_text());
        }
        Command::ScoreExternal { predictions, .. } => {
            let accuracy = score_external(predictions)?;
            let report = single_value_report(
                "Clip-level detection accuracy of external predictions (%)",
                &predictions.display().to_string(),
                accuracy,
                &(),
                cfg.seed,
                0,
                &[],
            )?;
            report.save(&out, "external")?;
            print!("{}", report.to_text());
        }
    }
    write_run_info(&out, started, command.name())
}

fn single_value_report<T: serde::Serialize>(
    title: &str,
    label: &str,
    accuracy: f64,
    config: &T,
    seed: u64,
    clips: usize,
    failures: &[(String, String)],
) -> Result<EvalReport> {
    let mut details = std::collections::BTreeMap::new();
    if clips > 0 {
        details.insert("clips".into(), clips.into());
    }
    if !failures.is_empty() {
        details.insert("failed_videos".into(), serde_json::to_value(failures)?);
    }
    Ok(EvalReport {
        title: title.into(),
        columns: vec!["Data".into(), "Acc".into()],
        rows: vec![ReportRow {
            labels: vec![label.into()],
            cells: vec![Cell::Accuracy(accuracy)],
        }],
        metadata: ReportMetadata {
            config_hash: crate::evaluation::config_hash(config),
            seed,
            details,
        },
    })
}
