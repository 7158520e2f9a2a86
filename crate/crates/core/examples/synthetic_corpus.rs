//! Render the procedural benchmark, encode it to H.265 and write a manifest.
//!
//! ```text
//! cargo run --example synthetic_corpus -- /tmp/corpus 50
//! ```

use std::path::PathBuf;
use std::time::Instant;

use temporal_defects::data_model::{validate_manifest, Split};
use temporal_defects::synthetic::{build_synthetic_corpus, SynthSpec};
use temporal_defects::transcoder::{Transcoder, TranscoderConfig};

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("tdefect-corpus"));
    let per_class = args.next().map(|s| s.parse()).transpose()?.unwrap_or(10);

    let spec = SynthSpec {
        n_videos_per_class: per_class,
        ..Default::default()
    };
    let transcoder = Transcoder::discover(&TranscoderConfig::default())?;
    let started = Instant::now();
    let corpus = build_synthetic_corpus(&spec, &out, &transcoder, 1)?;
    println!("wrote {} videos to {} in {:.1?}", corpus.manifest.records.len(), out.display(), started.elapsed());
    for split in Split::ALL {
        println!("  {split}: {} videos", corpus.manifest.count(split));
    }
    println!("corpus hash {}", corpus.hash);
    let problems = validate_manifest(&corpus.manifest);
    println!("manifest violations: {}", problems.len());
    Ok(())
}
