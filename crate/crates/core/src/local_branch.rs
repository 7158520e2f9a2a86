//! Local motion evidence: a frame predictor trained only on real videos,
//! signed prediction residuals, their temporal mean, and a strided
//! convolutional encoder that turns the mean residual map into `f_local`.
//!
//! Residual convention: for a clip `f_1..f_T` there are `T−2` residuals
//! `r_t = P(f_t, f_{t+1}) − f_{t+2}`, `t = 1..T−2`.

use std::collections::BTreeMap;
use std::path::Path;

use log::{info, warn};
use ndarray::{concatenate, s, Array1, Array2, Array3, Array4, ArrayView3, ArrayView4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data_model::{Clip, Frame, Label};
use crate::error::{Error, Result};
use crate::nn::{
    copy_values, global_avg_pool, global_avg_pool_backward, relu, relu_backward, upsample2x,
    upsample2x_backward, visit_child, visit_child_mut, zero_grad, Adam, Conv2d, ConvCache, Param,
    Parameterized, Rng64,
};

const PRED_STEM: usize = 16;
const PRED_DOWN: usize = 32;
const PRED_MID: usize = 16;
const PRED_DEC: usize = 8;

/// Predicts frame `t+2` from frames `t` and `t+1`.
///
/// A small encoder–decoder over the 6-channel concatenation of both inputs.
/// The decoder output is added to the most recent input frame and its last
/// layer starts at zero, so an untrained predictor copies the last frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePredictor {
    enc1: Conv2d,
    enc2: Conv2d,
    mid: Conv2d,
    dec1: Conv2d,
    dec2: Conv2d,
    frozen: bool,
}

struct PredictorCache {
    c_enc1: ConvCache,
    p_enc1: Array4<f64>,
    c_enc2: ConvCache,
    p_enc2: Array4<f64>,
    c_mid: ConvCache,
    p_mid: Array4<f64>,
    mid_hw: (usize, usize),
    c_dec1: ConvCache,
    p_dec1: Array4<f64>,
    c_dec2: ConvCache,
}

impl FramePredictor {
    pub fn new(seed: u64) -> Self {
        let mut rng = Rng64::seed_from_u64(seed);
        Self {
            enc1: Conv2d::new(6, PRED_STEM, 3, 1, 1, &mut rng),
            enc2: Conv2d::new(PRED_STEM, PRED_DOWN, 3, 2, 1, &mut rng),
            mid: Conv2d::new(PRED_DOWN, PRED_MID, 3, 1, 1, &mut rng),
            dec1: Conv2d::new(PRED_MID + PRED_STEM, PRED_DEC, 3, 1, 1, &mut rng),
            dec2: Conv2d::new(PRED_DEC, 3, 3, 1, 1, &mut rng).zeroed(),
            frozen: false,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// `x` is `[N, 6, H, W]`: frame t in channels 0..3, frame t+1 in 3..6.
    fn forward_batch(&self, x: ArrayView4<'_, f64>) -> (Array4<f64>, PredictorCache) {
        let (_, _, h, w) = x.dim();
        let (p_enc1, c_enc1) = self.enc1.forward(x);
        let e1 = relu(&p_enc1);
        let (p_enc2, c_enc2) = self.enc2.forward(e1.view());
        let e2 = relu(&p_enc2);
        let (p_mid, c_mid) = self.mid.forward(e2.view());
        let m = relu(&p_mid);
        let mid_hw = (m.dim().2, m.dim().3);
        let up = upsample2x(m.view(), h, w);
        let cat = concatenate(Axis(1), &[up.view(), e1.view()]).expect("matching spatial dims");
        let (p_dec1, c_dec1) = self.dec1.forward(cat.view());
        let d1 = relu(&p_dec1);
        let (d2, c_dec2) = self.dec2.forward(d1.view());
        let out = &x.slice(s![.., 3..6, .., ..]) + &d2;
        (
            out,
            PredictorCache {
                c_enc1,
                p_enc1,
                c_enc2,
                p_enc2,
                c_mid,
                p_mid,
                mid_hw,
                c_dec1,
                p_dec1,
                c_dec2,
            },
        )
    }

    fn backward_batch(&mut self, cache: &PredictorCache, dout: &Array4<f64>) {
        let dd1 = self.dec2.backward(&cache.c_dec2, dout.view());
        let dd1 = relu_backward(&cache.p_dec1, &dd1);
        let dcat = self.dec1.backward(&cache.c_dec1, dd1.view());
        let dup = dcat.slice(s![.., ..PRED_MID, .., ..]);
        let de1_skip = dcat.slice(s![.., PRED_MID.., .., ..]);
        let dm = upsample2x_backward(dup, cache.mid_hw.0, cache.mid_hw.1);
        let dm = relu_backward(&cache.p_mid, &dm);
        let de2 = self.mid.backward(&cache.c_mid, dm.view());
        let de2 = relu_backward(&cache.p_enc2, &de2);
        let mut de1 = self.enc2.backward(&cache.c_enc2, de2.view());
        de1 += &de1_skip;
        let de1 = relu_backward(&cache.p_enc1, &de1);
        self.enc1.backward(&cache.c_enc1, de1.view());
    }

    /// Unclamped prediction of the frame after `next`, H×W×3.
    fn predict_unchecked(&self, prev: ArrayView3<'_, f64>, next: ArrayView3<'_, f64>) -> Array3<f64> {
        let input = pair_input(&[(prev, next)]);
        let (out, _) = self.forward_batch(input.view());
        chw_to_hwc(out.index_axis(Axis(0), 0))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new(serde_json::json!({
            "kind": "frame_predictor",
            "frozen": self.frozen,
        }));
        ckpt.insert_module("predictor", self);
        ckpt
    }

    /// Loaded predictors are always frozen.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut p = Self::new(0);
        ckpt.load_module("predictor", &mut p)?;
        p.frozen = true;
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl Parameterized for FramePredictor {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
        visit_child("enc1", &self.enc1, f);
        visit_child("enc2", &self.enc2, f);
        visit_child("mid", &self.mid, f);
        visit_child("dec1", &self.dec1, f);
        visit_child("dec2", &self.dec2, f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        visit_child_mut("enc1", &mut self.enc1, f);
        visit_child_mut("enc2", &mut self.enc2, f);
        visit_child_mut("mid", &mut self.mid, f);
        visit_child_mut("dec1", &mut self.dec1, f);
        visit_child_mut("dec2", &mut self.dec2, f);
    }
}

pub fn hwc_to_chw(x: ArrayView3<'_, f64>) -> Array3<f64> {
    x.permuted_axes([2, 0, 1]).as_standard_layout().into_owned()
}

pub fn chw_to_hwc(x: ArrayView3<'_, f64>) -> Array3<f64> {
    x.permuted_axes([1, 2, 0]).as_standard_layout().into_owned()
}

fn pair_input(pairs: &[(ArrayView3<'_, f64>, ArrayView3<'_, f64>)]) -> Array4<f64> {
    let (h, w, _) = pairs[0].0.dim();
    let mut x = Array4::zeros((pairs.len(), 6, h, w));
    for (i, (a, b)) in pairs.iter().enumerate() {
        x.slice_mut(s![i, 0..3, .., ..]).assign(&a.view().permuted_axes([2, 0, 1]));
        x.slice_mut(s![i, 3..6, .., ..]).assign(&b.view().permuted_axes([2, 0, 1]));
    }
    x
}

/// Signed residual `predicted − actual`, H×W×3.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionErrorMap {
    pub residual: Array3<f64>,
    pub pair_index: usize,
}

/// Element-wise temporal mean of a clip's residual maps, H×W×3.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatedErrorMap {
    pub map: Array3<f64>,
}

impl AggregatedErrorMap {
    pub fn mean_abs(&self) -> f64 {
        self.map.mapv(f64::abs).mean().unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalFeature {
    pub vector: Array1<f64>,
}

pub fn predict_frame(p: &FramePredictor, f_t: &Frame, f_next: &Frame) -> Result<Array3<f64>> {
    if !p.is_frozen() {
        return Err(Error::PredictorNotFrozen);
    }
    if f_t.shape() != f_next.shape() {
        return Err(Error::shape(f_t.shape(), f_next.shape()));
    }
    Ok(p.predict_unchecked(f_t.pixels(), f_next.pixels()))
}

/// Exactly `T−2` residual maps for a clip of `T ≥ 3` frames.
pub fn compute_prediction_errors(p: &FramePredictor, clip: &Clip) -> Result<Vec<PredictionErrorMap>> {
    if clip.len() < 3 {
        return Err(Error::ClipTooShort(clip.len()));
    }
    residual_maps(p, clip.frames())
}

/// Residual maps for every consecutive triple of `frames`; entry `t` is
/// `P(frames[t], frames[t+1]) − frames[t+2]`.
pub fn residual_maps(p: &FramePredictor, frames: &[Frame]) -> Result<Vec<PredictionErrorMap>> {
    if frames.len() < 3 {
        return Err(Error::ClipTooShort(frames.len()));
    }
    if !p.is_frozen() {
        return Err(Error::PredictorNotFrozen);
    }
    let shape = frames[0].shape();
    if let Some(f) = frames.iter().find(|f| f.shape() != shape) {
        return Err(Error::shape(shape, f.shape()));
    }
    let starts: Vec<usize> = (0..frames.len() - 2).collect();
    let mut maps = Vec::with_capacity(starts.len());
    for chunk in starts.chunks(8) {
        let pairs: Vec<_> = chunk
            .iter()
            .map(|&t| (frames[t].pixels(), frames[t + 1].pixels()))
            .collect();
        let (out, _) = p.forward_batch(pair_input(&pairs).view());
        for (i, &t) in chunk.iter().enumerate() {
            let predicted = chw_to_hwc(out.index_axis(Axis(0), i));
            maps.push(PredictionErrorMap {
                residual: predicted - &frames[t + 2].pixels(),
                pair_index: t,
            });
        }
    }
    Ok(maps)
}

pub fn aggregate_prediction_errors(maps: &[PredictionErrorMap]) -> Result<AggregatedErrorMap> {
    let first = maps.first().ok_or(Error::EmptySequence)?;
    let mut sum = Array3::<f64>::zeros(first.residual.raw_dim());
    for m in maps {
        if m.residual.dim() != first.residual.dim() {
            return Err(Error::shape(first.residual.dim(), m.residual.dim()));
        }
        sum += &m.residual;
    }
    Ok(AggregatedErrorMap {
        map: sum / maps.len() as f64,
    })
}

/// Reconstruction loss for predictor training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorLoss {
    L1,
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorTrainConfig {
    pub loss: PredictorLoss,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Train on random square crops of this side; `None` uses full frames.
    pub crop: Option<usize>,
    pub patience: usize,
    /// Anneal the learning rate to zero over `epochs` along a half cosine.
    pub cosine_decay: bool,
    pub seed: u64,
}

impl Default for PredictorTrainConfig {
    fn default() -> Self {
        Self {
            loss: PredictorLoss::L1,
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            crop: Some(32),
            patience: 20,
            cosine_decay: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PredictorTrainReport {
    pub triples: usize,
    pub held_out_triples: usize,
    /// Held-out mean absolute residual after each epoch.
    pub held_out_mae: Vec<f64>,
    /// Same metric for the copy-last-frame baseline.
    pub copy_last_mae: f64,
    pub train_l1: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Unique frames keyed by `(source_id, timestamp)` plus index triples.
#[derive(Default)]
struct TripleSet {
    frames: Vec<Array3<f64>>,
    index: BTreeMap<(String, usize), usize>,
    triples: Vec<[usize; 3]>,
}

impl TripleSet {
    fn collect(clips: impl IntoIterator<Item = Clip>) -> Result<Self> {
        let mut set = TripleSet::default();
        let mut seen = std::collections::BTreeSet::new();
        for clip in clips {
            if clip.label != Label::Real {
                return Err(Error::LabelLeak(clip.source_id.clone()));
            }
            let ids: Vec<usize> = clip
                .frames()
                .iter()
                .map(|f| {
                    let key = (clip.source_id.clone(), f.timestamp_index());
                    *set.index.entry(key).or_insert_with(|| {
                        set.frames.push(hwc_to_chw(f.pixels()));
                        set.frames.len() - 1
                    })
                })
                .collect();
            for w in ids.windows(3) {
                let t = [w[0], w[1], w[2]];
                if seen.insert(t) {
                    set.triples.push(t);
                }
            }
        }
        Ok(set)
    }

    fn batch(&self, triples: &[[usize; 3]], crop: Option<(usize, &mut Rng64)>) -> (Array4<f64>, Array4<f64>) {
        let (_, h, w) = self.frames[0].dim();
        let (ch, cw, mut rng) = match crop {
            Some((side, rng)) => (side.min(h), side.min(w), Some(rng)),
            None => (h, w, None),
        };
        let mut x = Array4::zeros((triples.len(), 6, ch, cw));
        let mut y = Array4::zeros((triples.len(), 3, ch, cw));
        for (i, t) in triples.iter().enumerate() {
            let (oy, ox) = match rng.as_mut() {
                Some(r) => (r.random_range(0..=h - ch), r.random_range(0..=w - cw)),
                None => (0, 0),
            };
            let win = s![.., oy..oy + ch, ox..ox + cw];
            x.slice_mut(s![i, 0..3, .., ..]).assign(&self.frames[t[0]].slice(win));
            x.slice_mut(s![i, 3..6, .., ..]).assign(&self.frames[t[1]].slice(win));
            y.slice_mut(s![i, .., .., ..]).assign(&self.frames[t[2]].slice(win));
        }
        (x, y)
    }
}

fn held_out_mae(p: &FramePredictor, set: &TripleSet) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in set.triples.chunks(8) {
        let (x, y) = set.batch(chunk, None);
        let (out, _) = p.forward_batch(x.view());
        total += (&out - &y).mapv(f64::abs).sum();
        count += y.len();
    }
    total / count.max(1) as f64
}

fn copy_last_mae(set: &TripleSet) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for t in &set.triples {
        total += (&set.frames[t[1]] - &set.frames[t[2]]).mapv(f64::abs).sum();
        count += set.frames[t[2]].len();
    }
    total / count.max(1) as f64
}

/// Train a predictor on REAL clips only with an L1 reconstruction loss and
/// return it frozen, restored to its best held-out epoch.
///
/// Any FAKE clip in either input fails with [`Error::LabelLeak`].
pub fn train_frame_predictor(
    real_clips: impl IntoIterator<Item = Clip>,
    held_out: impl IntoIterator<Item = Clip>,
    config: &PredictorTrainConfig,
) -> Result<(FramePredictor, PredictorTrainReport)> {
    let train = TripleSet::collect(real_clips)?;
    let val = TripleSet::collect(held_out)?;
    if train.triples.is_empty() {
        return Err(Error::Precondition("no training triples for the frame predictor".into()));
    }
    let mut report = PredictorTrainReport {
        triples: train.triples.len(),
        held_out_triples: val.triples.len(),
        copy_last_mae: copy_last_mae(&val),
        ..Default::default()
    };
    let mut model = FramePredictor::new(config.seed);
    let mut best = model.clone();
    let mut best_mae = if val.triples.is_empty() {
        f64::INFINITY
    } else {
        held_out_mae(&model, &val)
    };
    let mut adam = Adam::new(config.learning_rate);
    let mut rng = Rng64::seed_from_u64(config.seed ^ 0x5eed_f00d);
    let mut order = train.triples.clone();
    let mut stale = 0;
    let steps_per_epoch = order.len().div_ceil(config.batch_size.max(1));
    let total_steps = (steps_per_epoch * config.epochs).max(1) as f64;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            if config.cosine_decay {
                let progress = adam.steps() as f64 / total_steps;
                adam.learning_rate = config.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            }
            let (x, y) = train.batch(chunk, config.crop.map(|c| (c, &mut rng)));
            let (out, cache) = model.forward_batch(x.view());
            let diff = &out - &y;
            let n = diff.len() as f64;
            epoch_loss += diff.mapv(f64::abs).sum() / n * chunk.len() as f64;
            let dout = match config.loss {
                PredictorLoss::L1 => diff.mapv(|d| d.signum() / n),
                PredictorLoss::Mse => diff.mapv(|d| 2.0 * d / n),
            };
            zero_grad(&mut model);
            model.backward_batch(&cache, &dout);
            adam.step(&mut model);
        }
        report.train_l1.push(epoch_loss / order.len() as f64);
        if val.triples.is_empty() {
            copy_values(&model, &mut best);
            continue;
        }
        let mae = held_out_mae(&model, &val);
        info!("predictor epoch {epoch}: held-out MAE {mae:.5}");
        report.held_out_mae.push(mae);
        if mae < best_mae {
            best_mae = mae;
            copy_values(&model, &mut best);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                let msg = format!(
                    "NonConvergence: held-out error did not improve for {stale} epochs (best {best_mae:.5})"
                );
                warn!("{msg}");
                report.warnings.push(msg);
                break;
            }
        }
    }
    best.freeze();
    Ok((best, report))
}

/// Strided convolutional encoder of aggregated residual maps.
///
/// Four stride-2 3×3 blocks widen 3 → 16 → 32 → 64 → C; the first three are
/// followed by ReLU and the last by global average pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalEncoder {
    pub blocks: Vec<Conv2d>,
    /// Feed `|map|` instead of the signed map.
    pub abs_input: bool,
}

pub struct LocalEncoderCache {
    convs: Vec<ConvCache>,
    pre: Vec<Array4<f64>>,
    last_hw: (usize, usize),
}

impl LocalEncoder {
    pub fn new(channels: usize, abs_input: bool, rng: &mut Rng64) -> Self {
        let widths = [3, 16, 32, 64, channels];
        let blocks = widths
            .windows(2)
            .map(|w| Conv2d::new(w[0], w[1], 3, 2, 1, rng))
            .collect();
        Self { blocks, abs_input }
    }

    pub fn channels(&self) -> usize {
        self.blocks.last().map_or(0, Conv2d::out_channels)
    }

    /// `maps` is `[N, 3, H, W]`; returns `[N, C]`.
    pub fn forward(&self, maps: ArrayView4<'_, f64>) -> (Array2<f64>, LocalEncoderCache) {
        let mut x = if self.abs_input {
            maps.mapv(f64::abs)
        } else {
            maps.to_owned()
        };
        let mut convs = Vec::with_capacity(self.blocks.len());
        let mut pre = Vec::with_capacity(self.blocks.len());
        let last = self.blocks.len() - 1;
        for (i, conv) in self.blocks.iter().enumerate() {
            let (y, cache) = conv.forward(x.view());
            convs.push(cache);
            x = if i < last { relu(&y) } else { y.clone() };
            pre.push(y);
        }
        let last_hw = (x.dim().2, x.dim().3);
        (global_avg_pool(x.view()), LocalEncoderCache { convs, pre, last_hw })
    }

    pub fn backward(&mut self, cache: &LocalEncoderCache, dfeat: &Array2<f64>) {
        let mut d = global_avg_pool_backward(dfeat, cache.last_hw.0, cache.last_hw.1);
        let last = self.blocks.len() - 1;
        for i in (0..self.blocks.len()).rev() {
            if i < last {
                d = relu_backward(&cache.pre[i], &d);
            }
            d = self.blocks[i].backward(&cache.convs[i], d.view());
        }
    }
}

impl Parameterized for LocalEncoder {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
        for (i, b) in self.blocks.iter().enumerate() {
            visit_child(&format!("block{i}"), b, f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            visit_child_mut(&format!("block{i}"), b, f);
        }
    }
}

pub fn encode_local(agg: &AggregatedErrorMap, encoder: &LocalEncoder) -> Result<LocalFeature> {
    let (_, _, c) = agg.map.dim();
    if c != 3 {
        return Err(Error::shape("H×W×3", agg.map.dim()));
    }
    let input = hwc_to_chw(agg.map.view()).insert_axis(Axis(0));
    let (feat, _) = encoder.forward(input.view());
    Ok(LocalFeature {
        vector: feat.row(0).to_owned(),
    })
}
