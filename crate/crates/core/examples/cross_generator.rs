//! Train on one synthetic generator and test on each of the others.
//!
//! ```text
//! cargo run --release --example cross_generator -- [run.toml]
//! ```

mod common;

use temporal_defects::evaluation::cross_generator_from_manifest;
use temporal_defects::synthetic::FakeDefect;

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let mut cfg = common::config()?;
    cfg.synth.fake_defects = vec![FakeDefect::AppearanceDrift, FakeDefect::MotionJitter];
    let t = common::transcoder(&cfg)?;
    let corpus = common::corpus(&cfg, &common::workdir("cross_generator")?, &t)?;
    let frozen = common::frozen(&cfg, &corpus, &t)?;
    let report = cross_generator_from_manifest(&corpus.manifest, &cfg.train, &frozen, &t, cfg.workers)?;
    print!("{}", report.to_text());
    Ok(())
}
