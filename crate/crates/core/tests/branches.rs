mod common;

use ndarray::{s, Array1, Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use temporal_defects::data_model::{Clip, Frame, Label};
use temporal_defects::fusion::{classify, detector_loss, fuse_batch, ClassifierHead, FusedFeature, FusionParams};
use temporal_defects::global_branch::{
    embed_frames, temporal_transform, EmbeddingSequence, FrameEmbedder, RandomPatchEmbedder, TemporalTransformer,
    TransformerConfig,
};
use temporal_defects::local_branch::{
    aggregate_prediction_errors, compute_prediction_errors, encode_local, predict_frame, AggregatedErrorMap,
    FramePredictor, LocalEncoder, PredictionErrorMap,
};
use temporal_defects::nn::{Mode, Rng64};

fn noise_frame(rng: &mut Rng64, side: usize, t: usize) -> Frame {
    Frame::new(Array3::from_shape_fn((side, side, 3), |_| rng.random()), t).unwrap()
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.dot(b) / (a.dot(a).sqrt() * b.dot(b).sqrt())
}

#[test]
fn predictor_is_deterministic() {
    let mut rng = Rng64::seed_from_u64(1);
    let (a, b) = (noise_frame(&mut rng, 16, 0), noise_frame(&mut rng, 16, 1));
    let mut p = FramePredictor::new(5);
    p.freeze();
    let mut q = FramePredictor::new(5);
    q.freeze();
    let first = predict_frame(&p, &a, &b).unwrap();
    assert_eq!(first, predict_frame(&p, &a, &b).unwrap());
    assert_eq!(first, predict_frame(&q, &a, &b).unwrap());
}

#[test]
fn three_frame_clip_gives_one_map() {
    let mut rng = Rng64::seed_from_u64(2);
    let frames: Vec<Frame> = (0..3).map(|t| noise_frame(&mut rng, 16, t)).collect();
    let clip = Clip::new(frames, 3, "v", Label::Real, None).unwrap();
    let mut p = FramePredictor::new(0);
    p.freeze();
    let maps = compute_prediction_errors(&p, &clip).unwrap();
    assert_eq!(maps.len(), 1);
    assert_eq!(maps[0].residual.dim(), (16, 16, 3));
}

#[test]
fn encoder_separates_different_maps() {
    let mut rng = Rng64::seed_from_u64(3);
    let encoder = LocalEncoder::new(32, false, &mut rng);
    let a = AggregatedErrorMap {
        map: Array3::from_shape_fn((32, 32, 3), |_| rng.random_range(-0.1..0.1)),
    };
    let b = AggregatedErrorMap {
        map: Array3::from_shape_fn((32, 32, 3), |_| rng.random_range(-0.1..0.1)),
    };
    let (fa, fb) = (encode_local(&a, &encoder).unwrap(), encode_local(&b, &encoder).unwrap());
    assert_eq!(fa.vector.len(), 32);
    assert_ne!(fa.vector, fb.vector);
    assert_eq!(fa, encode_local(&a, &encoder).unwrap());

    // batched and single forward agree
    let batch = Array4::from_shape_fn((2, 3, 32, 32), |(n, c, y, x)| if n == 0 { a.map[[y, x, c]] } else { b.map[[y, x, c]] });
    let (both, _) = encoder.forward(batch.view());
    assert!((&both.row(0) - &fa.vector).iter().all(|d| d.abs() < 1e-12));
}

#[test]
fn embedder_rows_follow_frames() {
    let mut rng = Rng64::seed_from_u64(4);
    let e = RandomPatchEmbedder::new(32, 0);
    let a = noise_frame(&mut rng, 32, 0);
    let b = noise_frame(&mut rng, 32, 1);
    let c = noise_frame(&mut rng, 32, 2);

    let same = e.embed_video("v", &[a.clone(), Frame::new(a.pixels().to_owned(), 1).unwrap()]).unwrap();
    assert_eq!(same.row(0), same.row(1));

    let forward = e.embed_video("v", &[a.clone(), b.clone(), c.clone()]).unwrap();
    let permuted = e.embed_video("v", &[c, a, b]).unwrap();
    for (i, j) in [(0, 1), (1, 2), (2, 0)] {
        assert_eq!(forward.row(i), permuted.row(j));
    }
    assert!(cosine(&forward.row(0).to_owned(), &forward.row(1).to_owned()) < 0.999);
}

#[test]
fn clip_embedding_has_one_row_per_frame() {
    let mut rng = Rng64::seed_from_u64(5);
    let frames: Vec<Frame> = (0..7).map(|t| noise_frame(&mut rng, 16, t)).collect();
    let clip = Clip::new(frames, 7, "v", Label::Real, None).unwrap();
    let seq = embed_frames(&RandomPatchEmbedder::new(12, 1), &clip).unwrap();
    assert_eq!(seq.tokens.dim(), (7, 12));
}

fn transformer(use_positions: bool) -> TemporalTransformer {
    let config = TransformerConfig {
        embed_dim: 12,
        channels: 16,
        layers: 2,
        heads: 4,
        max_len: 8,
        use_positions,
    };
    TemporalTransformer::new(&config, &mut Rng64::seed_from_u64(6)).unwrap()
}

#[test]
fn positions_decide_order_sensitivity() {
    let mut rng = Rng64::seed_from_u64(7);
    let tokens = Array2::from_shape_fn((7, 12), |_| rng.random_range(-1.0..1.0));
    let reversed = tokens.slice(s![..;-1, ..]).to_owned();
    let seq = |t: Array2<f64>| EmbeddingSequence { tokens: t };

    let plain = transformer(false);
    let a = temporal_transform(&seq(tokens.clone()), &plain).unwrap();
    let b = temporal_transform(&seq(reversed.clone()), &plain).unwrap();
    assert!(a.vector.iter().zip(&b.vector).all(|(x, y)| (x - y).abs() < 1e-10));

    let positioned = transformer(true);
    let a = temporal_transform(&seq(tokens), &positioned).unwrap();
    let b = temporal_transform(&seq(reversed), &positioned).unwrap();
    assert!(a.vector.iter().zip(&b.vector).any(|(x, y)| (x - y).abs() > 1e-6));
}

#[test]
fn wide_fusion_matches_scalar_loop() {
    let mut rng = Rng64::seed_from_u64(8);
    let mut params = FusionParams::new(16, 4, &mut rng).unwrap();
    common::randomize(&mut params, &mut rng);
    let local = Array2::from_shape_fn((5, 16), |_| rng.random_range(-2.0..2.0));
    let glob = Array2::from_shape_fn((5, 16), |_| rng.random_range(-2.0..2.0));
    for mode in [Mode::Eval, Mode::Train] {
        let (rho, _) = params.forward(local.view(), glob.view(), mode).unwrap();
        let fused = fuse_batch(local.view(), glob.view(), rho.view());
        let (rho_o, fused_o) = common::fusion_loop(&params, &common::to_rows(&local), &common::to_rows(&glob), mode);
        assert!(common::max_diff(&rho, &rho_o) <= 1e-7);
        assert!(common::max_diff(&fused, &fused_o) <= 1e-7);
    }
}

#[test]
fn probabilities_stay_in_unit_interval() {
    let mut rng = Rng64::seed_from_u64(9);
    let head = ClassifierHead::new(16, &mut rng);
    for _ in 0..1000 {
        let scale = 10f64.powi(rng.random_range(-2..4));
        let f = FusedFeature {
            vector: Array1::from_shape_fn(16, |_| rng.random_range(-scale..scale)),
        };
        let p = classify(&f, &head);
        assert!((0.0..=1.0).contains(&p), "{p}");
    }
}

#[test]
fn loss_matches_scalar_loop() {
    let mut rng = Rng64::seed_from_u64(10);
    for _ in 0..50 {
        let n = rng.random_range(1..40);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.001..0.999)).collect();
        let y: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
        let mut total = 0.0;
        for i in 0..n {
            total -= if y[i] == 1.0 { p[i].ln() } else { (1.0 - p[i]).ln() };
        }
        assert!((detector_loss(&p, &y).unwrap() - total / n as f64).abs() <= 1e-9);
    }
}

#[test]
fn aggregation_is_linear_and_order_free() {
    let mut rng = Rng64::seed_from_u64(12);
    let maps: Vec<PredictionErrorMap> = (0..5)
        .map(|t| PredictionErrorMap {
            residual: Array3::from_shape_fn((4, 4, 3), |_| rng.random_range(-1.0..1.0)),
            pair_index: t,
        })
        .collect();
    let base = aggregate_prediction_errors(&maps).unwrap().map;
    let scaled: Vec<PredictionErrorMap> = maps
        .iter()
        .map(|m| PredictionErrorMap {
            residual: &m.residual * -2.5,
            pair_index: m.pair_index,
        })
        .collect();
    let lin = aggregate_prediction_errors(&scaled).unwrap().map;
    assert!(lin.iter().zip(&base).all(|(a, b)| (a - -2.5 * b).abs() <= 1e-6));
    let mut reversed = maps.clone();
    reversed.reverse();
    let rev = aggregate_prediction_errors(&reversed).unwrap().map;
    assert!(rev.iter().zip(&base).all(|(a, b)| (a - b).abs() <= 1e-6));
}
