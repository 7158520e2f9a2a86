//! Train on clean videos, then evaluate on bit-error, ABR and CRF copies of
//! the TEST split.
//!
//! ```text
//! cargo run --release --example robustness -- [run.toml]
//! ```

mod common;

use temporal_defects::data_model::Split;
use temporal_defects::degradation::degrade_corpus;
use temporal_defects::evaluation::robustness_eval;
use temporal_defects::training::train_detector;

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let cfg = common::config()?;
    let t = common::transcoder(&cfg)?;
    let dir = common::workdir("robustness")?;
    let corpus = common::corpus(&cfg, &dir.join("corpus"), &t)?;
    let frozen = common::frozen(&cfg, &corpus, &t)?;
    let outcome = train_detector(&corpus.manifest, &cfg.train, &frozen, &t, cfg.workers)?;

    let test = corpus.manifest.filtered(|r| r.split == Split::Test);
    let degraded = degrade_corpus(&test, &cfg.degrade, &dir.join("degraded"), &t, cfg.workers)?;
    for (path, why) in &degraded.failures {
        println!("skipped {}: {why}", path.display());
    }
    let report = robustness_eval(&outcome.bundle, &degraded.manifest, &t, cfg.workers, cfg.seed)?;
    print!("{}", report.to_text());
    Ok(())
}
