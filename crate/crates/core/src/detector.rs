//! The assembled detector: frozen predictor and embedder, trainable local
//! encoder, temporal transformer and one of three heads.
//!
//! The frozen parts never change during detector training, so their outputs
//! are computed once per video: residual maps for every frame triple and an
//! embedding for every frame. A clip starting at `s` then uses the mean of
//! residuals `s..s+T-2` and embedding rows `s..s+T`, which is exactly what
//! the per-clip operations in [`crate::local_branch`] and
//! [`crate::global_branch`] produce.

use std::path::Path;
use std::sync::Arc;

use ndarray::{concatenate, s, Array1, Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data_model::{clip_id, DegradationSpec, Label, Manifest, Split, VideoRecord};
use crate::error::{Error, Result};
use crate::fusion::{ClassifierHead, FusionClassifier, FusionClassifierCache, DEFAULT_REDUCTION_RATIO};
use crate::global_branch::{
    FrameEmbedder, PrecomputedEmbeddings, RandomPatchEmbedder, TemporalTransformer, TransformerCache,
    TransformerConfig,
};
use crate::ingestion::{load_video, slice_clips, LoadedVideo};
use crate::local_branch::{residual_maps, FramePredictor, LocalEncoder, LocalEncoderCache};
use crate::nn::{fingerprint, visit_child, visit_child_mut, Linear, Mode, Param, Parameterized, Rng64};
use crate::transcoder::Transcoder;

/// Which evidence reaches the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    /// `f_glob` straight into the head.
    GlobalOnly,
    /// `[f_local, f_glob]` through a linear `2C → C` projection, then the head.
    Concat,
    /// Channel-attention fusion.
    CaFusion,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::GlobalOnly, Variant::Concat, Variant::CaFusion];

    pub fn uses_local(self) -> bool {
        self != Variant::GlobalOnly
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub variant: Variant,
    pub channels: usize,
    pub embed_dim: usize,
    pub reduction_ratio: usize,
    pub transformer_layers: usize,
    pub heads: usize,
    pub use_positions: bool,
    /// Encode `|Ĥ|` instead of the signed mean residual.
    pub abs_local_input: bool,
    /// Constant multiplier on the residual map before the encoder.
    pub local_gain: f64,
    /// Subtract each clip's mean embedding from its tokens, leaving only
    /// the frame-to-frame variation.
    pub center_tokens: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            variant: Variant::CaFusion,
            channels: 128,
            embed_dim: 128,
            reduction_ratio: DEFAULT_REDUCTION_RATIO,
            transformer_layers: 2,
            heads: 4,
            use_positions: true,
            abs_local_input: false,
            local_gain: 100.0,
            center_tokens: true,
        }
    }
}

/// How to rebuild the frozen embedder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderSpec {
    RandomPatch {
        dim: usize,
        #[serde(default)]
        seed: u64,
    },
    Precomputed { dir: std::path::PathBuf },
}

impl EmbedderSpec {
    pub fn build(&self) -> Result<Arc<dyn FrameEmbedder>> {
        Ok(match self {
            EmbedderSpec::RandomPatch { dim, seed } => Arc::new(RandomPatchEmbedder::new(*dim, *seed)),
            EmbedderSpec::Precomputed { dir } => Arc::new(PrecomputedEmbeddings::load_dir(dir)?),
        })
    }
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec::RandomPatch { dim: 128, seed: 0 }
    }
}

/// The two parts of the model that detector training must not touch.
#[derive(Clone)]
pub struct FrozenComponents {
    pub predictor: Option<Arc<FramePredictor>>,
    pub embedder: Option<Arc<dyn FrameEmbedder>>,
    pub embedder_spec: Option<EmbedderSpec>,
}

impl FrozenComponents {
    pub fn new(predictor: FramePredictor, embedder_spec: EmbedderSpec) -> Result<Self> {
        let embedder = embedder_spec.build()?;
        Ok(Self {
            predictor: Some(Arc::new(predictor)),
            embedder: Some(embedder),
            embedder_spec: Some(embedder_spec),
        })
    }

    pub fn predictor(&self) -> Result<&FramePredictor> {
        let p = self
            .predictor
            .as_deref()
            .ok_or_else(|| Error::FrozenComponentMissing("frame predictor".into()))?;
        if !p.is_frozen() {
            return Err(Error::PredictorNotFrozen);
        }
        Ok(p)
    }

    pub fn embedder(&self) -> Result<&dyn FrameEmbedder> {
        self.embedder
            .as_deref()
            .ok_or_else(|| Error::FrozenComponentMissing("frame embedder".into()))
    }

    /// `(predictor, embedder)` parameter hashes.
    pub fn fingerprints(&self) -> Result<(String, String)> {
        Ok((fingerprint(self.predictor()?), self.embedder()?.fingerprint()))
    }
}

/// Precomputed frozen-branch outputs for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipFeatures {
    pub clip_id: String,
    pub source_id: String,
    pub label: Label,
    pub generator_tag: Option<String>,
    pub split: Split,
    pub degradation: Option<DegradationSpec>,
    /// Mean residual map, `[3, H, W]`.
    pub local_map: Array3<f32>,
    /// Frame embeddings, `[T, D]`.
    pub tokens: Array2<f32>,
}

/// Clip features of one decoded video.
pub fn video_features(
    frozen: &FrozenComponents,
    video: &LoadedVideo,
    clip_length: usize,
    stride: usize,
) -> Result<Vec<ClipFeatures>> {
    let starts = slice_clips(video.frames.len(), clip_length, stride)?;
    if starts.is_empty() {
        return Ok(Vec::new());
    }
    let record = &video.record;
    let source_id = record.source_id();
    let residuals = residual_maps(frozen.predictor()?, &video.frames)?;
    let embeddings = frozen.embedder()?.embed_video(&source_id, &video.frames)?;
    let n_maps = clip_length - 2;
    starts
        .into_iter()
        .map(|s| {
            let mut sum = residuals[s].residual.clone();
            for m in &residuals[s + 1..s + n_maps] {
                sum += &m.residual;
            }
            let mean = sum / n_maps as f64;
            Ok(ClipFeatures {
                clip_id: clip_id(&source_id, s),
                source_id: source_id.clone(),
                label: record.label,
                generator_tag: record.generator_tag.clone(),
                split: record.split,
                degradation: record.degradation,
                local_map: mean.permuted_axes([2, 0, 1]).mapv(|v| v as f32).as_standard_layout().into_owned(),
                tokens: embeddings.slice(s![s..s + clip_length, ..]).mapv(|v| v as f32),
            })
        })
        .collect()
}

/// Decode and featurize the given records. Per-video failures are returned
/// alongside the features instead of aborting the whole set.
pub fn extract_features<'a>(
    manifest: &Manifest,
    records: impl IntoIterator<Item = &'a VideoRecord>,
    frozen: &FrozenComponents,
    transcoder: &Transcoder,
    clip_length: usize,
    stride: usize,
    workers: usize,
) -> Result<(Vec<ClipFeatures>, Vec<(String, String)>)> {
    frozen.predictor()?;
    frozen.embedder()?;
    let records: Vec<&VideoRecord> = records.into_iter().collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Precondition(e.to_string()))?;
    let results: Vec<Result<Vec<ClipFeatures>>> = pool.install(|| {
        records
            .par_iter()
            .map(|r| {
                let video = load_video(transcoder, manifest, r)?;
                video_features(frozen, &video, clip_length, stride)
            })
            .collect()
    });
    let mut features = Vec::new();
    let mut failures = Vec::new();
    for (r, res) in records.iter().zip(results) {
        match res {
            Ok(f) => features.extend(f),
            Err(e) => {
                let what = match r.degradation {
                    Some(d) => format!("{} ({})", r.path.display(), d.tag()),
                    None => r.path.display().to_string(),
                };
                failures.push((what, format!("{}: {e}", e.kind())))
            }
        }
    }
    Ok((features, failures))
}

#[derive(Clone, Debug, PartialEq)]
enum Head {
    GlobalOnly(ClassifierHead),
    Concat { proj: Linear, head: ClassifierHead },
    CaFusion(FusionClassifier),
}

enum HeadCache {
    GlobalOnly(Array2<f64>),
    Concat { x: Array2<f64>, z: Array2<f64> },
    CaFusion(FusionClassifierCache),
}

pub struct DetectorCache {
    encoder: Option<LocalEncoderCache>,
    transformer: TransformerCache,
    head: HeadCache,
}

/// Trainable part of the detector.
#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub config: DetectorConfig,
    encoder: LocalEncoder,
    transformer: TemporalTransformer,
    head: Head,
}

impl Detector {
    pub fn new(config: &DetectorConfig, seed: u64) -> Result<Self> {
        let mut rng = Rng64::seed_from_u64(seed);
        let c = config.channels;
        let encoder = LocalEncoder::new(c, config.abs_local_input, &mut rng);
        let transformer = TemporalTransformer::new(
            &TransformerConfig {
                embed_dim: config.embed_dim,
                channels: c,
                layers: config.transformer_layers,
                heads: config.heads,
                max_len: 32,
                use_positions: config.use_positions,
            },
            &mut rng,
        )?;
        let head = match config.variant {
            Variant::GlobalOnly => Head::GlobalOnly(ClassifierHead::new(c, &mut rng)),
            Variant::Concat => Head::Concat {
                proj: Linear::new(2 * c, c, true, &mut rng),
                head: ClassifierHead::new(c, &mut rng),
            },
            Variant::CaFusion => Head::CaFusion(FusionClassifier::new(c, config.reduction_ratio, &mut rng)?),
        };
        Ok(Self {
            config: config.clone(),
            encoder,
            transformer,
            head,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    fn local_batch(&self, batch: &[&ClipFeatures]) -> Result<Array4<f64>> {
        let (c, h, w) = batch[0].local_map.dim();
        let mut x = Array4::zeros((batch.len(), c, h, w));
        for (i, f) in batch.iter().enumerate() {
            if f.local_map.dim() != (c, h, w) {
                return Err(Error::shape((c, h, w), f.local_map.dim()));
            }
            let gain = self.config.local_gain;
            x.slice_mut(s![i, .., .., ..]).assign(&f.local_map.mapv(|v| v as f64 * gain));
        }
        Ok(x)
    }

    fn token_batch(&self, batch: &[&ClipFeatures]) -> Result<(Array2<f64>, usize)> {
        let (t, d) = batch[0].tokens.dim();
        let mut x = Array2::zeros((batch.len() * t, d));
        for (i, f) in batch.iter().enumerate() {
            if f.tokens.dim() != (t, d) {
                return Err(Error::shape((t, d), f.tokens.dim()));
            }
            let mut tokens = f.tokens.mapv(|v| v as f64);
            if self.config.center_tokens {
                tokens -= &tokens.mean_axis(Axis(0)).expect("clip has frames");
            }
            x.slice_mut(s![i * t..(i + 1) * t, ..]).assign(&tokens);
        }
        Ok((x, t))
    }

    /// FAKE probabilities for a batch.
    pub fn forward(&self, batch: &[&ClipFeatures], mode: Mode) -> Result<(Array1<f64>, DetectorCache)> {
        if batch.is_empty() {
            return Err(Error::EmptySequence);
        }
        let (tokens, t) = self.token_batch(batch)?;
        let (f_glob, tr_cache) = self.transformer.forward(tokens.view(), batch.len(), t)?;
        let (f_local, enc_cache) = if self.config.variant.uses_local() {
            let maps = self.local_batch(batch)?;
            let (f, c) = self.encoder.forward(maps.view());
            (Some(f), Some(c))
        } else {
            (None, None)
        };
        let (probs, head) = match &self.head {
            Head::GlobalOnly(head) => (head.forward(f_glob.view()), HeadCache::GlobalOnly(f_glob)),
            Head::Concat { proj, head } => {
                let f_local = f_local.expect("concat uses the local branch");
                let x = concatenate(Axis(1), &[f_local.view(), f_glob.view()]).expect("equal batch sizes");
                let z = proj.forward(x.view());
                (head.forward(z.view()), HeadCache::Concat { x, z })
            }
            Head::CaFusion(fc) => {
                let f_local = f_local.expect("fusion uses the local branch");
                let (p, cache) = fc.forward(f_local.view(), f_glob.view(), mode)?;
                (p, HeadCache::CaFusion(cache))
            }
        };
        Ok((
            probs,
            DetectorCache {
                encoder: enc_cache,
                transformer: tr_cache,
                head,
            },
        ))
    }

    /// Accumulate gradients from logit gradients `dlogits`.
    pub fn backward(&mut self, cache: &DetectorCache, dlogits: &Array1<f64>) {
        let c = self.config.channels;
        let (dlocal, dglob) = match (&mut self.head, &cache.head) {
            (Head::GlobalOnly(head), HeadCache::GlobalOnly(f)) => (None, head.backward(f.view(), dlogits.view())),
            (Head::Concat { proj, head }, HeadCache::Concat { x, z }) => {
                let dz = head.backward(z.view(), dlogits.view());
                let dx = proj.backward(x.view(), dz.view());
                (Some(dx.slice(s![.., ..c]).to_owned()), dx.slice(s![.., c..]).to_owned())
            }
            (Head::CaFusion(fc), HeadCache::CaFusion(hc)) => {
                let (dl, dg) = fc.backward(hc, dlogits.view());
                (Some(dl), dg)
            }
            _ => unreachable!("cache produced by a different head"),
        };
        self.transformer.backward(&cache.transformer, &dglob);
        if let (Some(dl), Some(ec)) = (dlocal, &cache.encoder) {
            self.encoder.backward(ec, &dl);
        }
    }

    /// Fold TRAIN-mode batch statistics into running estimates.
    pub fn update_running(&mut self, cache: &DetectorCache) {
        if let (Head::CaFusion(fc), HeadCache::CaFusion(hc)) = (&mut self.head, &cache.head) {
            fc.update_running(hc);
        }
    }

    /// Inference-mode probabilities in batches of `batch_size`.
    pub fn predict(&self, clips: &[ClipFeatures], batch_size: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(clips.len());
        for chunk in clips.chunks(batch_size.max(1)) {
            let refs: Vec<&ClipFeatures> = chunk.iter().collect();
            out.extend(self.forward(&refs, Mode::Eval)?.0);
        }
        Ok(out)
    }
}

impl Parameterized for Detector {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
        visit_child("encoder", &self.encoder, f);
        visit_child("transformer", &self.transformer, f);
        match &self.head {
            Head::GlobalOnly(h) => visit_child("head", h, f),
            Head::Concat { proj, head } => {
                visit_child("proj", proj, f);
                visit_child("head", head, f);
            }
            Head::CaFusion(fc) => visit_child("fusion", fc, f),
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        visit_child_mut("encoder", &mut self.encoder, f);
        visit_child_mut("transformer", &mut self.transformer, f);
        match &mut self.head {
            Head::GlobalOnly(h) => visit_child_mut("head", h, f),
            Head::Concat { proj, head } => {
                visit_child_mut("proj", proj, f);
                visit_child_mut("head", head, f);
            }
            Head::CaFusion(fc) => visit_child_mut("fusion", fc, f),
        }
    }
}

/// Everything needed to score new videos: trained detector, frozen
/// predictor, and the embedder recipe, stored in one checkpoint file.
#[derive(Clone)]
pub struct DetectorBundle {
    pub detector: Detector,
    pub frozen: FrozenComponents,
    pub clip_length: usize,
    pub stride: usize,
}

impl DetectorBundle {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let (pf, ef) = self.frozen.fingerprints()?;
        let mut ckpt = Checkpoint::new(serde_json::json!({
            "kind": "detector",
            "detector": self.detector.config,
            "embedder": self.frozen.embedder_spec,
            "clip_length": self.clip_length,
            "stride": self.stride,
            "predictor_fingerprint": pf,
            "embedder_fingerprint": ef,
        }));
        ckpt.insert_module("detector", &self.detector);
        ckpt.insert_module("predictor", self.frozen.predictor()?);
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = &ckpt.metadata;
        if meta["kind"] != "detector" {
            return Err(Error::Checkpoint("not a detector checkpoint".into()));
        }
        let field = |name: &str| {
            meta.get(name)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("metadata lacks '{name}'")))
        };
        let config: DetectorConfig = serde_json::from_value(field("detector")?)?;
        let embedder: Option<EmbedderSpec> = serde_json::from_value(field("embedder")?)?;
        let embedder = embedder.ok_or_else(|| Error::FrozenComponentMissing("frame embedder".into()))?;
        let mut detector = Detector::new(&config, 0)?;
        ckpt.load_module("detector", &mut detector)?;
        let predictor = FramePredictor::from_checkpoint(ckpt)?;
        let frozen = FrozenComponents::new(predictor, embedder)?;
        let (pf, ef) = frozen.fingerprints()?;
        if meta.get("predictor_fingerprint").and_then(|v| v.as_str()) != Some(pf.as_str())
            || meta.get("embedder_fingerprint").and_then(|v| v.as_str()) != Some(ef.as_str())
        {
            return Err(Error::Checkpoint("frozen component fingerprint mismatch".into()));
        }
        Ok(Self {
            detector,
            frozen,
            clip_length: serde_json::from_value(field("clip_length")?)?,
            stride: serde_json::from_value(field("stride")?)?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn features(n: usize, seed: u64) -> Vec<ClipFeatures> {
        let mut rng = Rng64::seed_from_u64(seed);
        (0..n)
            .map(|i| ClipFeatures {
                clip_id: format!("v{i}#0"),
                source_id: format!("v{i}"),
                label: if i % 2 == 0 { Label::Real } else { Label::Fake },
                generator_tag: None,
                split: Split::Train,
                degradation: None,
                local_map: Array3::from_shape_fn((3, 16, 16), |_| rng.random_range(-0.1..0.1)),
                tokens: Array2::from_shape_fn((7, 8), |_| rng.random_range(-1.0..1.0)),
            })
            .collect()
    }

    fn small(variant: Variant) -> DetectorConfig {
        DetectorConfig {
            variant,
            channels: 8,
            embed_dim: 8,
            heads: 2,
            ..Default::default()
        }
    }

    #[test]
    fn every_variant_runs_forward_and_backward() {
        let feats = features(4, 1);
        let refs: Vec<&ClipFeatures> = feats.iter().collect();
        for v in Variant::ALL {
            let mut d = Detector::new(&small(v), 3).unwrap();
            let (p, cache) = d.forward(&refs, Mode::Train).unwrap();
            assert_eq!(p.len(), 4);
            assert!(p.iter().all(|x| *x > 0.0 && *x < 1.0));
            d.backward(&cache, &Array1::from_elem(4, 0.1));
            let mut touched = 0;
            d.visit_params(&mut |_, p| touched += p.grad.iter().any(|g| *g != 0.0) as usize);
            assert!(touched > 0);
        }
    }

    #[test]
    fn global_only_ignores_local_maps() {
        let a = features(3, 1);
        let mut b = a.clone();
        for f in &mut b {
            f.local_map.fill(5.0);
        }
        let d = Detector::new(&small(Variant::GlobalOnly), 3).unwrap();
        assert_eq!(d.predict(&a, 8).unwrap(), d.predict(&b, 8).unwrap());
    }
}
