//! Pretrain the frame predictor on real clips and compare the prediction
//! residuals it leaves on real and generated videos.
//!
//! ```text
//! cargo run --release --example frame_predictor -- [run.toml]
//! ```

mod common;

use temporal_defects::data_model::{Label, Split};
use temporal_defects::training::FeatureSet;

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let cfg = common::config()?;
    let t = common::transcoder(&cfg)?;
    let corpus = common::corpus(&cfg, &common::workdir("frame_predictor")?, &t)?;
    let frozen = common::frozen(&cfg, &corpus, &t)?;

    let test = corpus.manifest.filtered(|r| r.split == Split::Test);
    let features = FeatureSet::extract(&test, &frozen, &t, cfg.train.clip_length, cfg.train.stride, cfg.workers)?;
    for label in [Label::Real, Label::Fake] {
        let maps: Vec<f64> = features
            .clips
            .iter()
            .filter(|c| c.label == label)
            .map(|c| c.local_map.mapv(f32::abs).mean().unwrap_or(0.0) as f64)
            .collect();
        let mean = maps.iter().sum::<f64>() / maps.len().max(1) as f64;
        println!("{label}: mean |residual| {mean:.5} over {} clips", maps.len());
    }
    Ok(())
}
