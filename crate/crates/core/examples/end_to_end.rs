//! Full pipeline: build the synthetic benchmark, pretrain and freeze the
//! frame predictor, train the detector and score it on the TEST split.
//!
//! ```text
//! cargo run --release --example end_to_end -- [run.toml]
//! ```

mod common;

use std::time::Instant;

use temporal_defects::data_model::Split;
use temporal_defects::evaluation::{evaluate_clips, write_predictions};
use temporal_defects::training::{train_detector, FeatureSet};

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let started = Instant::now();
    let cfg = common::config()?;
    let t = common::transcoder(&cfg)?;
    let dir = common::workdir("end_to_end")?;
    let corpus = common::corpus(&cfg, &dir.join("corpus"), &t)?;
    let frozen = common::frozen(&cfg, &corpus, &t)?;

    let outcome = train_detector(&corpus.manifest, &cfg.train, &frozen, &t, cfg.workers)?;
    for e in &outcome.log.epochs {
        println!("epoch {:>2}: loss {:.4}, val {:.2}%", e.epoch, e.train_loss, e.val_accuracy);
    }
    outcome.bundle.save(dir.join("detector.tdck"))?;

    let test = corpus.manifest.filtered(|r| r.split == Split::Test);
    let features = FeatureSet::extract(&test, &frozen, &t, cfg.train.clip_length, cfg.train.stride, cfg.workers)?;
    let eval = evaluate_clips(&outcome.bundle.detector, &features.split(Split::Test))?;
    write_predictions(dir.join("predictions.jsonl"), &eval.predictions)?;
    println!(
        "{:?}: test accuracy {:.2}% on {} clips ({:.1?})",
        cfg.train.model.variant,
        eval.accuracy,
        eval.predictions.len(),
        started.elapsed()
    );
    Ok(())
}
