use ndarray::Array3;
use rand::{Rng, SeedableRng};
use temporal_defects::data_model::{Clip, Frame, Label};
use temporal_defects::local_branch::{
    aggregate_prediction_errors, compute_prediction_errors, predict_frame, train_frame_predictor,
    FramePredictor, PredictorTrainConfig,
};
use temporal_defects::nn::Rng64;
use temporal_defects::synthetic::{gen_fake_video, gen_real_video, FakeDefect, SynthSpec};

const SIDE: usize = 16;

fn clip_from(frames: Vec<Array3<f64>>, id: &str) -> Clip {
    let n = frames.len();
    let frames = frames.into_iter().enumerate().map(|(i, p)| Frame::new(p, i).unwrap()).collect();
    Clip::new(frames, n, id, Label::Real, None).unwrap()
}

fn static_clip(rng: &mut Rng64, id: &str) -> Clip {
    let img = Array3::from_shape_fn((SIDE, SIDE, 3), |_| rng.random_range(0.0..1.0));
    clip_from(vec![img; 7], id)
}

/// A 4×4 bright square moving one pixel per frame across a dark background.
fn square_clip(x0: i64, y0: i64, vx: i64, vy: i64, id: &str) -> Clip {
    let frames = (0..7i64)
        .map(|t| {
            let (cx, cy) = (x0 + vx * t, y0 + vy * t);
            Array3::from_shape_fn((SIDE, SIDE, 3), |(y, x, c)| {
                let inside = (cx..cx + 4).contains(&(x as i64)) && (cy..cy + 4).contains(&(y as i64));
                if inside {
                    0.9 - 0.1 * c as f64
                } else {
                    0.1
                }
            })
        })
        .collect();
    clip_from(frames, id)
}

fn copy_last_residual(clips: &[Clip]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for clip in clips {
        for w in clip.frames().windows(3) {
            total += (&w[1].pixels() - &w[2].pixels()).mapv(f64::abs).sum();
            count += w[2].pixels().len();
        }
    }
    total / count as f64
}

fn mean_residual(p: &FramePredictor, clips: &[Clip]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for clip in clips {
        for m in compute_prediction_errors(p, clip).unwrap() {
            total += m.residual.mapv(f64::abs).sum();
            count += m.residual.len();
        }
    }
    total / count as f64
}

fn full_frame_config(epochs: usize) -> PredictorTrainConfig {
    PredictorTrainConfig {
        epochs,
        crop: None,
        patience: epochs,
        batch_size: 8,
        ..Default::default()
    }
}

#[test]
fn static_videos_are_predicted_almost_exactly() {
    let mut rng = Rng64::seed_from_u64(1);
    let train: Vec<_> = (0..6).map(|i| static_clip(&mut rng, &format!("s{i}"))).collect();
    let held: Vec<_> = (0..3).map(|i| static_clip(&mut rng, &format!("h{i}"))).collect();
    let (p, _) = train_frame_predictor(train, held.clone(), &full_frame_config(3)).unwrap();
    assert!(mean_residual(&p, &held) <= 0.01);

    let frame = held[0].frames()[0].clone();
    let out = predict_frame(&p, &frame, &Frame::new(frame.pixels().to_owned(), 1).unwrap()).unwrap();
    assert!((&out - &frame.pixels()).mapv(f64::abs).mean().unwrap() <= 0.02);
}

#[test]
fn translating_squares_beat_copy_last() {
    let mut train = Vec::new();
    let mut held = Vec::new();
    let velocities = [(1, 0), (-1, 0), (0, 1), (0, -1)];
    for (i, &(vx, vy)) in velocities.iter().cycle().take(32).enumerate() {
        let x0 = if vx < 0 { 10 } else { 2 } + (i as i64 % 3) - 1;
        let y0 = if vy < 0 { 10 } else { 2 } + (i as i64 / 4 % 3) - 1;
        let clip = square_clip(x0, y0, vx, vy, &format!("sq{i}"));
        if i % 4 == i / 4 % 4 {
            held.push(clip);
        } else {
            train.push(clip);
        }
    }
    let baseline = copy_last_residual(&held);
    let (p, report) = train_frame_predictor(train, held.clone(), &full_frame_config(40)).unwrap();
    let trained = mean_residual(&p, &held);
    assert!((report.copy_last_mae - baseline).abs() < 1e-12);
    assert!(trained < baseline, "predictor {trained:.5} vs copy-last {baseline:.5}");
}

#[test]
fn static_reals_separate_from_jittered_fakes() {
    let spec = SynthSpec {
        height: 32,
        width: 32,
        ..Default::default()
    };
    let mut p = FramePredictor::new(0);
    p.freeze();
    let mut real_total = 0.0;
    let mut fake_total = 0.0;
    for i in 0..4 {
        let real = gen_real_video(&spec, i);
        let first = real.frames[0].pixels().to_owned();
        let still = clip_from(vec![first; 7], "still");
        let maps = compute_prediction_errors(&p, &still).unwrap();
        real_total += aggregate_prediction_errors(&maps).unwrap().mean_abs();

        let fake = gen_fake_video(&spec, i, FakeDefect::MotionJitter).unwrap();
        let frames = fake.frames[..7].to_vec();
        let clip = Clip::new(frames, 7, "jitter", Label::Fake, None).unwrap();
        let maps = compute_prediction_errors(&p, &clip).unwrap();
        fake_total += aggregate_prediction_errors(&maps).unwrap().mean_abs();
    }
    assert!(fake_total > 0.0);
    assert!(real_total <= 0.1 * fake_total, "{real_total} vs {fake_total}");
}
