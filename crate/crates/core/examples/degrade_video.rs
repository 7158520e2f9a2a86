//! Apply every lossy operation at every severity to one encoded clip and
//! report the size, bitrate and PSNR of each copy.
//!
//! ```text
//! cargo run --example degrade_video
//! ```

mod common;

use temporal_defects::data_model::Operation;
use temporal_defects::degradation::{degrade_file, DegradationPlan};
use temporal_defects::synthetic::{gen_real_video, SynthSpec};
use temporal_defects::transcoder::{bitrate_of, psnr};

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let cfg = common::config()?;
    let t = common::transcoder(&cfg)?;
    let dir = common::workdir("degrade_video")?;

    let spec = SynthSpec {
        height: 64,
        width: 64,
        frames_per_video: 48,
        ..Default::default()
    };
    let video = gen_real_video(&spec, 0);
    let source = dir.join("source.hevc");
    t.encode_frames(&video.frames, &source, spec.encode_crf)?;
    let (bps, frames) = t.measure_bitrate(&source)?;
    println!("source: {frames} frames, {:.0} kbit/s", bps / 1e3);

    println!("{:<12} {:>3} {:>10} {:>10} {:>8}", "operation", "sev", "param", "kbit/s", "PSNR");
    for op in Operation::LOSSY {
        for severity in 1..=3 {
            let plan = DegradationPlan::new(op, severity, cfg.seed)?;
            let out = dir.join(format!("{}.hevc", plan.spec.tag()));
            degrade_file(&t, &source, &out, &plan, "source")?;
            let decoded = t.decode_lenient(&out)?;
            let size = std::fs::metadata(&out)?.len();
            let rate = bitrate_of(size, decoded.frames.len(), t.config().fps);
            // concealment can drop frames, which leaves PSNR undefined
            let quality = psnr(&video.frames, &decoded.frames).map_or("-".into(), |p| format!("{p:.2}"));
            println!(
                "{:<12} {severity:>3} {:>10} {:>10.0} {quality:>8}",
                op.as_str(),
                plan.parameter,
                rate / 1e3
            );
        }
    }
    Ok(())
}
