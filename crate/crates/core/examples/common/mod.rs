//! Helpers shared by the examples.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::time::Instant;

use temporal_defects::config::{Overrides, RunConfig};
use temporal_defects::detector::FrozenComponents;
use temporal_defects::synthetic::{build_synthetic_corpus, SynthCorpus};
use temporal_defects::training::train_predictor_on_manifest;
use temporal_defects::transcoder::Transcoder;

/// Small enough to finish in a couple of minutes on one core.
pub const QUICK: &str = r#"
[synth]
height = 32
width = 32
frames_per_video = 12
n_videos_per_class = 16

[predictor]
epochs = 4
crop = 16

[train]
max_epochs = 15
channels = 32
embed_dim = 32

[embedder]
kind = "random_patch"
dim = 32
"#;

/// The config named by the first argument, or [`QUICK`].
pub fn config() -> anyhow::Result<RunConfig> {
    let path = std::env::args().nth(1).map(PathBuf::from);
    let mut cfg = match &path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::parse(QUICK)?,
    };
    cfg.apply(&Overrides::default());
    cfg.validate()?;
    Ok(cfg)
}

pub fn workdir(name: &str) -> anyhow::Result<PathBuf> {
    let dir = std::env::temp_dir().join("tdefect-examples").join(name);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

pub fn transcoder(cfg: &RunConfig) -> anyhow::Result<Transcoder> {
    Ok(Transcoder::discover(&cfg.transcoder)?)
}

pub fn corpus(cfg: &RunConfig, dir: &Path, t: &Transcoder) -> anyhow::Result<SynthCorpus> {
    let started = Instant::now();
    let corpus = build_synthetic_corpus(&cfg.synth, dir, t, cfg.workers)?;
    println!(
        "corpus: {} videos in {} ({:.1?})",
        corpus.manifest.records.len(),
        dir.display(),
        started.elapsed()
    );
    Ok(corpus)
}

/// Pretrain the predictor on the corpus and pair it with the embedder.
pub fn frozen(cfg: &RunConfig, corpus: &SynthCorpus, t: &Transcoder) -> anyhow::Result<FrozenComponents> {
    let started = Instant::now();
    let (predictor, report) =
        train_predictor_on_manifest(&corpus.manifest, &cfg.predictor, t, cfg.train.clip_length, cfg.workers)?;
    let best = report.held_out_mae.iter().copied().fold(f64::INFINITY, f64::min);
    println!(
        "predictor: {} triples, held-out MAE {best:.5} (copy-last {:.5}) ({:.1?})",
        report.triples,
        report.copy_last_mae,
        started.elapsed()
    );
    Ok(FrozenComponents::new(predictor, cfg.embedder.clone())?)
}
