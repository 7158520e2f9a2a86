//! Global-only, concatenation and channel-attention fusion trained on the
//! same frozen features, median accuracy over three seeds.
//!
//! ```text
//! cargo run --release --example ablation -- [run.toml]
//! ```

mod common;

use temporal_defects::evaluation::ablation_run;
use temporal_defects::training::FeatureSet;

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let cfg = common::config()?;
    let t = common::transcoder(&cfg)?;
    let corpus = common::corpus(&cfg, &common::workdir("ablation")?, &t)?;
    let frozen = common::frozen(&cfg, &corpus, &t)?;
    let features =
        FeatureSet::extract(&corpus.manifest, &frozen, &t, cfg.train.clip_length, cfg.train.stride, cfg.workers)?;
    let seeds = [cfg.seed, cfg.seed + 1, cfg.seed + 2];
    let report = ablation_run(&features, &cfg.train, &seeds)?;
    print!("{}", report.to_text());
    Ok(())
}
