//! Independent oracles shared by the integration tests and the acceptance
//! harness. Every check recomputes its quantity with plain loops and returns
//! whether the library agrees.

#![allow(dead_code)]

use std::time::{Duration, Instant};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use temporal_defects::degradation::{inject_bit_errors, severity_to_parameter};
use temporal_defects::data_model::Operation;
use temporal_defects::fusion::{detector_loss, detector_loss_logit_grad, fuse_batch, FusionClassifier, FusionParams};
use temporal_defects::ingestion::slice_clips;
use temporal_defects::local_branch::{aggregate_prediction_errors, PredictionErrorMap};
use temporal_defects::nn::{zero_grad, BatchNorm1d, Mode, Param, Parameterized, Rng64};

pub struct Outcome {
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl Outcome {
    fn new(passed: bool, detail: String, start: Instant) -> Self {
        Self {
            passed,
            detail,
            elapsed: start.elapsed(),
        }
    }
}

const EPS: f64 = 1e-5;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-major `[out][in]` weight matrix of a bias-free linear layer.
fn weight(p: &Param) -> Vec<Vec<f64>> {
    let (out, inp) = (p.shape[0], p.shape[1]);
    (0..out).map(|o| p.value[o * inp..(o + 1) * inp].to_vec()).collect()
}

/// Normalize column `j` of `u` (rows are samples).
fn batch_norm_loop(u: &[Vec<f64>], bn: &BatchNorm1d, mode: Mode) -> Vec<Vec<f64>> {
    let n = u.len();
    let width = u[0].len();
    let mut out = vec![vec![0.0; width]; n];
    for j in 0..width {
        let (mean, var) = match mode {
            Mode::Eval => (bn.running_mean.value[j], bn.running_var.value[j]),
            Mode::Train => {
                let mut mean = 0.0;
                for row in u {
                    mean += row[j];
                }
                mean /= n as f64;
                let mut var = 0.0;
                for row in u {
                    var += (row[j] - mean) * (row[j] - mean);
                }
                (mean, var / n as f64)
            }
        };
        for i in 0..n {
            out[i][j] = bn.gamma.value[j] * (u[i][j] - mean) / (var + EPS).sqrt() + bn.beta.value[j];
        }
    }
    out
}

fn matvec_rows(x: &[Vec<f64>], w: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            w.iter()
                .map(|wr| {
                    let mut acc = 0.0;
                    for k in 0..row.len() {
                        acc += wr[k] * row[k];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Gate and fused features for a batch, computed element by element.
pub fn fusion_loop(
    params: &FusionParams,
    local: &[Vec<f64>],
    glob: &[Vec<f64>],
    mode: Mode,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let s: Vec<Vec<f64>> = local
        .iter()
        .zip(glob)
        .map(|(l, g)| l.iter().zip(g).map(|(a, b)| a + b).collect())
        .collect();
    let u1 = matvec_rows(&s, &weight(&params.w1.weight));
    let z1 = batch_norm_loop(&u1, &params.bn1, mode);
    let a1: Vec<Vec<f64>> = z1.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect();
    let u2 = matvec_rows(&a1, &weight(&params.w2.weight));
    let z2 = batch_norm_loop(&u2, &params.bn2, mode);
    let rho: Vec<Vec<f64>> = z2.iter().map(|r| r.iter().map(|v| sigmoid(*v)).collect()).collect();
    let mut fused = vec![vec![0.0; local[0].len()]; local.len()];
    for i in 0..local.len() {
        for c in 0..local[0].len() {
            fused[i][c] = rho[i][c] * local[i][c] + (1.0 - rho[i][c]) * glob[i][c];
        }
    }
    (rho, fused)
}

pub fn randomize(params: &mut FusionParams, rng: &mut Rng64) {
    params.visit_params_mut(&mut |name, p| {
        for v in p.value.iter_mut() {
            *v = if name.ends_with("running_var") {
                rng.random_range(0.2..3.0)
            } else if name.ends_with("gamma") {
                rng.random_range(0.5..2.0)
            } else {
                rng.random_range(-1.0..1.0)
            };
        }
    });
}

pub fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn max_diff(a: &Array2<f64>, b: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, row) in b.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            worst = worst.max((a[[i, j]] - v).abs());
        }
    }
    worst
}

pub fn check_fusion_oracle() -> Outcome {
    let start = Instant::now();
    let (c, r) = (8, 4);
    let mut rng = Rng64::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for instance in 0..100 {
        let mut params = FusionParams::new(c, r, &mut rng).unwrap();
        randomize(&mut params, &mut rng);
        let n = 1 + instance % 6;
        let local = Array2::from_shape_fn((n, c), |_| rng.random_range(-2.0..2.0));
        let glob = Array2::from_shape_fn((n, c), |_| rng.random_range(-2.0..2.0));
        for mode in [Mode::Eval, Mode::Train] {
            if mode == Mode::Train && n < 2 {
                continue;
            }
            let (rho, _) = params.forward(local.view(), glob.view(), mode).unwrap();
            let fused = fuse_batch(local.view(), glob.view(), rho.view());
            let (rho_o, fused_o) = fusion_loop(&params, &to_rows(&local), &to_rows(&glob), mode);
            worst = worst.max(max_diff(&rho, &rho_o)).max(max_diff(&fused, &fused_o));
        }
    }
    let elapsed = start.elapsed();
    Outcome::new(
        worst <= 1e-6 && elapsed < Duration::from_secs(1),
        format!("max |Δ| {worst:.2e} over 100 instances in {:.3}s", elapsed.as_secs_f64()),
        start,
    )
}

pub fn check_convexity() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng64::seed_from_u64(12);
    let mut violations = 0usize;
    let mut channels_checked = 0usize;
    for trial in 0..1000 {
        let c = 4 * (1 + trial % 8);
        let mut params = FusionParams::new(c, 4, &mut rng).unwrap();
        randomize(&mut params, &mut rng);
        let scale = 10f64.powi(rng.random_range(-3..4));
        let local = Array2::from_shape_fn((1, c), |_| rng.random_range(-scale..scale));
        let glob = Array2::from_shape_fn((1, c), |_| rng.random_range(-scale..scale));
        let (rho, _) = params.forward(local.view(), glob.view(), Mode::Eval).unwrap();
        let fused = fuse_batch(local.view(), glob.view(), rho.view());
        for j in 0..c {
            let (l, g, f) = (local[[0, j]], glob[[0, j]], fused[[0, j]]);
            // one rounding step of slack on each side
            let ulp = f64::EPSILON * l.abs().max(g.abs());
            if f < l.min(g) - ulp || f > l.max(g) + ulp || !(rho[[0, j]] > 0.0 && rho[[0, j]] < 1.0) {
                violations += 1;
            }
            channels_checked += 1;
        }
    }
    Outcome::new(
        violations == 0,
        format!("{violations} violations in 1000 trials ({channels_checked} channels)"),
        start,
    )
}

fn loss_of(model: &FusionClassifier, local: &Array2<f64>, glob: &Array2<f64>, labels: &[f64]) -> f64 {
    let (probs, _) = model.forward(local.view(), glob.view(), Mode::Train).unwrap();
    detector_loss(probs.as_slice().unwrap(), labels).unwrap()
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Analytic gradients of BCE(classify(fuse(gate))) against central
/// differences, for every trainable parameter and every input entry.
pub fn check_gradients() -> Outcome {
    let start = Instant::now();
    let (c, r, n) = (8, 4, 6);
    let h = 1e-4;
    let mut rng = Rng64::seed_from_u64(13);
    let mut model = FusionClassifier::new(c, r, &mut rng).unwrap();
    randomize(&mut model.gate, &mut rng);
    let local = Array2::from_shape_fn((n, c), |_| rng.random_range(-1.5..1.5));
    let glob = Array2::from_shape_fn((n, c), |_| rng.random_range(-1.5..1.5));
    let labels: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();

    let (probs, cache) = model.forward(local.view(), glob.view(), Mode::Train).unwrap();
    zero_grad(&mut model);
    let dlogits = detector_loss_logit_grad(probs.as_slice().unwrap(), &labels);
    let (dlocal, dglob) = model.backward(&cache, dlogits.view());

    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let mut names = Vec::new();
    model.visit_params(&mut |name, p| {
        if p.trainable {
            names.push((name.to_string(), p.len()));
        }
    });
    for (name, len) in &names {
        for idx in 0..*len {
            let mut analytic = 0.0;
            model.visit_params(&mut |n2, p| {
                if n2 == name {
                    analytic = p.grad[idx];
                }
            });
            let nudged = |delta: f64| {
                let mut m = model.clone();
                m.visit_params_mut(&mut |n2, p| {
                    if n2 == name {
                        p.value[idx] += delta;
                    }
                });
                loss_of(&m, &local, &glob, &labels)
            };
            let numeric = (nudged(h) - nudged(-h)) / (2.0 * h);
            worst = worst.max(relative_error(analytic, numeric));
            checked += 1;
        }
    }
    for (which, grad) in [(0, &dlocal), (1, &dglob)] {
        for i in 0..n {
            for j in 0..c {
                let shifted = |delta: f64| {
                    let (mut l, mut g) = (local.clone(), glob.clone());
                    if which == 0 {
                        l[[i, j]] += delta;
                    } else {
                        g[[i, j]] += delta;
                    }
                    loss_of(&model, &l, &g, &labels)
                };
                let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
                worst = worst.max(relative_error(grad[[i, j]], numeric));
                checked += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    Outcome::new(
        worst <= 1e-3 && elapsed < Duration::from_secs(10),
        format!("max relative error {worst:.2e} over {checked} entries in {:.2}s", elapsed.as_secs_f64()),
        start,
    )
}

pub fn check_aggregation() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng64::seed_from_u64(14);
    let mut worst: f64 = 0.0;
    for count in 1..=30 {
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        let maps: Vec<PredictionErrorMap> = (0..count)
            .map(|t| PredictionErrorMap {
                residual: Array3::from_shape_fn((h, w, 3), |_| rng.random_range(-1.0..1.0)),
                pair_index: t,
            })
            .collect();
        let agg = aggregate_prediction_errors(&maps).unwrap();
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let mut sum = 0.0;
                    for m in &maps {
                        sum += m.residual[[y, x, ch]];
                    }
                    worst = worst.max((agg.map[[y, x, ch]] - sum / count as f64).abs());
                }
            }
        }
    }
    Outcome::new(worst <= 1e-6, format!("max |Δ| {worst:.2e} for counts 1..=30"), start)
}

pub fn check_clip_arithmetic() -> Outcome {
    let start = Instant::now();
    let headline = slice_clips(24, 7, 1).unwrap().len();
    let mut mismatches = 0usize;
    let mut cases = 0usize;
    for frames in 0..=100usize {
        for length in 2..=12usize {
            for stride in 1..=8usize {
                let mut expected = Vec::new();
                let mut s = 0;
                while s + length <= frames {
                    expected.push(s);
                    s += stride;
                }
                if slice_clips(frames, length, stride).unwrap() != expected {
                    mismatches += 1;
                }
                cases += 1;
            }
        }
    }
    Outcome::new(
        headline == 18 && mismatches == 0,
        format!("slice_clips(24, 7, 1) gives {headline} clips; {mismatches} mismatches in {cases} cases"),
        start,
    )
}

pub fn check_bit_errors() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng64::seed_from_u64(15);
    let mut failures = Vec::new();
    let mut cases: Vec<(usize, usize)> = (0..40)
        .map(|_| {
            let n = rng.random_range(1..200);
            (rng.random_range(0..5000), n)
        })
        .collect();
    for n in [1_000_000usize, 500_000, 300_000] {
        cases.push((2 * n + n / 2, n));
        cases.push((n - 1, n));
    }
    for (seed, (len, n)) in cases.into_iter().enumerate() {
        let buf: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        let out = inject_bit_errors(&buf, n, seed as u64).unwrap();
        let hamming: u32 = buf.iter().zip(&out).map(|(a, b)| (a ^ b).count_ones()).sum();
        let per_block_ok = buf
            .chunks(n)
            .zip(out.chunks(n))
            .all(|(a, b)| {
                let d: u32 = a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum();
                d == u32::from(a.len() == n)
            });
        if hamming as usize != len / n || !per_block_ok {
            failures.push(format!("len {len} N {n}: distance {hamming}"));
        }
    }
    let table = [
        (Operation::BitError, [10e5, 5e5, 3e5]),
        (Operation::H265Abr, [0.5, 0.25, 0.125]),
        (Operation::H265Crf, [27.0, 33.0, 39.0]),
    ];
    for (op, values) in table {
        for (i, v) in values.iter().enumerate() {
            let got = severity_to_parameter(op, i as u8 + 1).unwrap();
            if got != *v {
                failures.push(format!("{op} severity {}: {got} != {v}", i + 1));
            }
        }
        if severity_to_parameter(op, 4).is_ok() || severity_to_parameter(op, 0).is_ok() {
            failures.push(format!("{op} accepts an out-of-range severity"));
        }
    }
    Outcome::new(
        failures.is_empty(),
        if failures.is_empty() {
            "Hamming distance equals floor(len/N) for all buffers; severity table exact".into()
        } else {
            failures.join("; ")
        },
        start,
    )
}

/// Peak signal-to-noise ratio over all frames, computed from raw bytes.
pub fn psnr_loop(reference: &[Vec<u8>], test: &[Vec<u8>]) -> f64 {
    let mut sq = 0.0;
    let mut count = 0usize;
    for (a, b) in reference.iter().zip(test) {
        for (x, y) in a.iter().zip(b) {
            let d = *x as f64 - *y as f64;
            sq += d * d;
            count += 1;
        }
    }
    let mse = sq / count as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0 * 255.0 / mse).log10()
    }
}

/// Fraction of predictions on the right side of 0.5 (ties are FAKE).
pub fn accuracy_loop(probs: &[f64], fake: &[bool]) -> f64 {
    let mut right = 0usize;
    for (p, f) in probs.iter().zip(fake) {
        if (*p >= 0.5) == *f {
            right += 1;
        }
    }
    100.0 * right as f64 / probs.len() as f64
}
