//! The channel-attention gate on hand-made branch features: each fused
//! channel lands between the local and global value, weighted by the gate.
//!
//! ```text
//! cargo run --example fusion_gate
//! ```

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use temporal_defects::fusion::{channel_attention, classify, fuse, ClassifierHead, FusionParams};
use temporal_defects::global_branch::GlobalFeature;
use temporal_defects::local_branch::LocalFeature;
use temporal_defects::nn::{Mode, Rng64};

fn main() -> anyhow::Result<()> {
    let channels = 8;
    let mut rng = Rng64::seed_from_u64(0);
    let params = FusionParams::new(channels, 4, &mut rng)?;
    let head = ClassifierHead::new(channels, &mut rng);

    let local = LocalFeature {
        vector: Array1::from_shape_fn(channels, |_| rng.random_range(-2.0..2.0)),
    };
    let global = GlobalFeature {
        vector: Array1::from_shape_fn(channels, |_| rng.random_range(-2.0..2.0)),
    };
    let gate = channel_attention(&local, &global, &params, Mode::Eval)?;
    let fused = fuse(&local, &global, &gate)?;

    println!("{:>3} {:>8} {:>8} {:>6} {:>8}", "c", "local", "global", "rho", "fused");
    for c in 0..channels {
        println!(
            "{c:>3} {:>8.4} {:>8.4} {:>6.3} {:>8.4}",
            local.vector[c], global.vector[c], gate.rho[c], fused.vector[c]
        );
    }
    println!("P(fake) = {:.4}", classify(&fused, &head));
    Ok(())
}
