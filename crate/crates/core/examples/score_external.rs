//! Score a per-clip probability dump written by any detector. Without an
//! argument a small dump is written first.
//!
//! ```text
//! cargo run --example score_external -- [predictions.jsonl]
//! ```

use std::path::PathBuf;

use temporal_defects::data_model::Label;
use temporal_defects::evaluation::{score_external, write_predictions, ClipPrediction};

fn main() -> anyhow::Result<()> {
    let path = match std::env::args().nth(1) {
        Some(p) => PathBuf::from(p),
        None => {
            let path = std::env::temp_dir().join("tdefect-external.jsonl");
            let dump = [
                ("real_0000#0", Label::Real, 0.12),
                ("real_0000#1", Label::Real, 0.61),
                ("drift_0000#0", Label::Fake, 0.50),
                ("drift_0000#1", Label::Fake, 0.93),
            ]
            .map(|(id, label, probability)| ClipPrediction {
                clip_id: id.into(),
                label,
                probability,
            });
            write_predictions(&path, &dump)?;
            path
        }
    };
    println!("{}: accuracy {:.2}%", path.display(), score_external(&path)?);
    Ok(())
}
