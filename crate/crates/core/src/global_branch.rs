//! Global appearance evidence: a frozen per-frame embedder followed by a
//! trainable temporal transformer whose mean-pooled output is `f_glob`.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint::{Checkpoint, Tensor};
use crate::data_model::{Clip, Frame};
use crate::error::{Error, Result};
use crate::nn::{
    fingerprint, gelu, gelu_backward, visit_child, visit_child_mut, AttentionCache, LayerNorm,
    LayerNormCache, Linear, MultiHeadAttention, Param, Parameterized, Rng64,
};

/// Per-frame image encoder. Implementations hold no trainable state.
pub trait FrameEmbedder: Send + Sync {
    fn embed_dim(&self) -> usize;

    /// One `D`-row per frame, in order. `source_id` lets lookup-based
    /// embedders find stored vectors; computed embedders ignore it.
    fn embed_video(&self, source_id: &str, frames: &[Frame]) -> Result<Array2<f64>>;

    /// Hash of everything that determines the embedding.
    fn fingerprint(&self) -> String;
}

/// Frozen random projection of an 8×8 grid of cell means.
///
/// Each frame is split into an 8×8 grid; the per-channel mean of every cell
/// (minus 0.5) gives a 192-vector, which a fixed Gaussian matrix drawn from
/// `seed` maps to `D` dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomPatchEmbedder {
    projection: Param,
    seed: u64,
}

pub const PATCH_GRID: usize = 8;
const PATCH_FEATURES: usize = PATCH_GRID * PATCH_GRID * 3;

impl RandomPatchEmbedder {
    pub fn new(embed_dim: usize, seed: u64) -> Self {
        let mut rng = Rng64::seed_from_u64(seed);
        let std = 1.0 / (PATCH_FEATURES as f64).sqrt();
        let value = (0..embed_dim * PATCH_FEATURES)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            })
            .collect();
        Self {
            projection: Param::from_vec(vec![embed_dim, PATCH_FEATURES], value).frozen(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn cell_means(frame: &Frame) -> Array1<f64> {
        let px = frame.pixels();
        let (h, w) = frame.shape();
        let mut out = Array1::zeros(PATCH_FEATURES);
        for gy in 0..PATCH_GRID {
            let (y0, y1) = (gy * h / PATCH_GRID, (gy + 1) * h / PATCH_GRID);
            for gx in 0..PATCH_GRID {
                let (x0, x1) = (gx * w / PATCH_GRID, (gx + 1) * w / PATCH_GRID);
                let cell = px.slice(s![y0..y1, x0..x1, ..]);
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                for c in 0..3 {
                    out[(gy * PATCH_GRID + gx) * 3 + c] = cell.slice(s![.., .., c]).sum() / n - 0.5;
                }
            }
        }
        out
    }

    pub fn embed_frame(&self, frame: &Frame) -> Array1<f64> {
        self.projection.view2().dot(&Self::cell_means(frame))
    }
}

impl Parameterized for RandomPatchEmbedder {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
        f("projection", &self.projection);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("projection", &mut self.projection);
    }
}

impl FrameEmbedder for RandomPatchEmbedder {
    fn embed_dim(&self) -> usize {
        self.projection.shape[0]
    }

    fn embed_video(&self, _source_id: &str, frames: &[Frame]) -> Result<Array2<f64>> {
        let d = self.embed_dim();
        let mut out = Array2::zeros((frames.len(), d));
        for (i, f) in frames.iter().enumerate() {
            let (h, w) = f.shape();
            if h < PATCH_GRID || w < PATCH_GRID {
                return Err(Error::shape((PATCH_GRID, PATCH_GRID), (h, w)));
            }
            out.row_mut(i).assign(&self.embed_frame(f));
        }
        Ok(out)
    }

    fn fingerprint(&self) -> String {
        fingerprint(self)
    }
}

/// Externally produced embeddings, one `[frames, D]` (or
/// `[frames, tokens, D]`, mean-pooled over tokens) matrix per source video.
///
/// On disk each video is a checkpoint file `<source_id>.tdck` holding a
/// tensor named `embeddings`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrecomputedEmbeddings {
    dim: usize,
    videos: BTreeMap<String, Array2<f64>>,
}

pub const EMBEDDING_TENSOR: &str = "embeddings";

impl PrecomputedEmbeddings {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            videos: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, source_id: impl Into<String>, rows: Array2<f64>) -> Result<()> {
        if rows.ncols() != self.dim {
            return Err(Error::DimensionMismatch(self.dim, rows.ncols()));
        }
        self.videos.insert(source_id.into(), rows);
        Ok(())
    }

    pub fn from_tensor(tensor: &Tensor) -> Result<Array2<f64>> {
        match tensor.shape[..] {
            [n, d] => Ok(Array2::from_shape_vec((n, d), tensor.data.clone()).expect("validated tensor")),
            [n, k, d] if k > 0 => {
                let a = Array3::from_shape_vec((n, k, d), tensor.data.clone()).expect("validated tensor");
                Ok(a.mean_axis(Axis(1)).expect("non-empty token axis"))
            }
            _ => Err(Error::Checkpoint(format!(
                "embedding tensor must be [frames, D] or [frames, tokens, D], got {:?}",
                tensor.shape
            ))),
        }
    }

    /// Load every `*.tdck` file in `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let mut entries: Vec<_> = std::fs::read_dir(dir.as_ref())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "tdck"))
            .collect();
        entries.sort();
        let mut out: Option<Self> = None;
        for path in entries {
            let ckpt = Checkpoint::load(&path)?;
            let rows = Self::from_tensor(ckpt.get(EMBEDDING_TENSOR)?)?;
            let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let store = out.get_or_insert_with(|| Self::new(rows.ncols()));
            store.insert(stem, rows)?;
        }
        out.ok_or_else(|| Error::Precondition(format!("no embedding files in {}", dir.as_ref().display())))
    }

    pub fn save_video(path: impl AsRef<Path>, rows: &Array2<f64>) -> Result<()> {
        let mut ckpt = Checkpoint::new(serde_json::json!({ "kind": "frame_embeddings" }));
        ckpt.insert(
            EMBEDDING_TENSOR,
            Tensor::new(vec![rows.nrows(), rows.ncols()], rows.iter().copied().collect())?,
        );
        ckpt.save(path)
    }
}

impl FrameEmbedder for PrecomputedEmbeddings {
    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn embed_video(&self, source_id: &str, frames: &[Frame]) -> Result<Array2<f64>> {
        let table = self
            .videos
            .get(source_id)
            .ok_or_else(|| Error::FrozenComponentMissing(format!("embeddings for '{source_id}'")))?;
        let mut out = Array2::zeros((frames.len(), self.dim));
        for (i, f) in frames.iter().enumerate() {
            let t = f.timestamp_index();
            if t >= table.nrows() {
                return Err(Error::shape(table.nrows(), t + 1));
            }
            out.row_mut(i).assign(&table.row(t));
        }
        Ok(out)
    }

    fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (k, v) in &self.videos {
            h.update(k.as_bytes());
            for x in v {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `T × D` token matrix; row `t` embeds frame `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence {
    pub tokens: Array2<f64>,
}

impl EmbeddingSequence {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalFeature {
    pub vector: Array1<f64>,
}

pub fn embed_frames(e: &dyn FrameEmbedder, clip: &Clip) -> Result<EmbeddingSequence> {
    let tokens = e.embed_video(&clip.source_id, clip.frames())?;
    if tokens.nrows() != clip.len() || tokens.ncols() != e.embed_dim() {
        return Err(Error::shape((clip.len(), e.embed_dim()), tokens.dim()));
    }
    Ok(EmbeddingSequence { tokens })
}

#[derive(Clone, Debug, PartialEq)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

struct LayerCache {
    ln1: LayerNormCache,
    n1: Array2<f64>,
    attn: AttentionCache,
    ln2: LayerNormCache,
    n2: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
}

impl EncoderLayer {
    fn new(dim: usize, heads: usize, rng: &mut Rng64) -> Self {
        Self {
            ln1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(dim, heads, rng),
            ln2: LayerNorm::new(dim),
            ff1: Linear::new(dim, 2 * dim, true, rng),
            ff2: Linear::new(2 * dim, dim, true, rng),
        }
    }

    fn forward(&self, x: &Array2<f64>, batch: usize, seq_len: usize) -> (Array2<f64>, LayerCache) {
        let (n1, ln1) = self.ln1.forward(x.view());
        let (a, attn) = self.attn.forward(n1.view(), batch, seq_len);
        let h = x + &a;
        let (n2, ln2) = self.ln2.forward(h.view());
        let u = self.ff1.forward(n2.view());
        let g = gelu(&u);
        let y = &h + &self.ff2.forward(g.view());
        (y, LayerCache { ln1, n1, attn, ln2, n2, u, g })
    }

    fn backward(&mut self, cache: &LayerCache, dy: &Array2<f64>) -> Array2<f64> {
        let dg = self.ff2.backward(cache.g.view(), dy.view());
        let du = gelu_backward(&cache.u, &dg);
        let dn2 = self.ff1.backward(cache.n2.view(), du.view());
        let dh = dy + &self.ln2.backward(&cache.ln2, dn2.view());
        let dn1 = self.attn.backward(cache.n1.view(), &cache.attn, dh.view());
        &dh + &self.ln1.backward(&cache.ln1, dn1.view())
    }
}

impl Parameterized for EncoderLayer {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
        visit_child("ln1", &self.ln1, f);
        visit_child("attn", &self.attn, f);
        visit_child("ln2", &self.ln2, f);
        visit_child("ff1", &self.ff1, f);
        visit_child("ff2", &self.ff2, f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        visit_child_mut("ln1", &mut self.ln1, f);
        visit_child_mut("attn", &mut self.attn, f);
        visit_child_mut("ln2", &mut self.ln2, f);
        visit_child_mut("ff1", &mut self.ff1, f);
        visit_child_mut("ff2", &mut self.ff2, f);
    }
}

/// Pre-norm transformer encoder over frame tokens with learned positional
/// embeddings, a final layer norm, and mean pooling over time.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalTransformer {
    input: Linear,
    positions: Param,
    pub use_positions: bool,
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TransformerConfig {
    pub embed_dim: usize,
    pub channels: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub use_positions: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            channels: 128,
            layers: 2,
            heads: 4,
            max_len: 32,
            use_positions: true,
        }
    }
}

pub struct TransformerCache {
    batch: usize,
    seq_len: usize,
    tokens: Array2<f64>,
    layers: Vec<LayerCache>,
    final_norm: LayerNormCache,
}

impl TemporalTransformer {
    pub fn new(config: &TransformerConfig, rng: &mut Rng64) -> Result<Self> {
        if config.heads == 0 || config.channels % config.heads != 0 {
            return Err(Error::Precondition(format!(
                "{} heads do not divide {} channels",
                config.heads, config.channels
            )));
        }
        let input = Linear::new(config.embed_dim, config.channels, true, rng);
        let positions = Param::normal(vec![config.max_len, config.channels], 0.02, rng);
        let layers = (0..config.layers)
            .map(|_| EncoderLayer::new(config.channels, config.heads, rng))
            .collect();
        Ok(Self {
            input,
            positions,
            use_positions: config.use_positions,
            layers,
            final_norm: LayerNorm::new(config.channels),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.input.in_dim()
    }

    pub fn channels(&self) -> usize {
        self.input.out_dim()
    }

    pub fn max_len(&self) -> usize {
        self.positions.shape[0]
    }

    /// `tokens` holds `batch` sequences of `seq_len` rows each; returns `[batch, C]`.
    pub fn forward(
        &self,
        tokens: ArrayView2<'_, f64>,
        batch: usize,
        seq_len: usize,
    ) -> Result<(Array2<f64>, TransformerCache)> {
        if tokens.ncols() != self.embed_dim() || tokens.nrows() != batch * seq_len {
            return Err(Error::shape((batch * seq_len, self.embed_dim()), tokens.dim()));
        }
        if seq_len == 0 || seq_len > self.max_len() {
            return Err(Error::shape(self.max_len(), seq_len));
        }
        let mut x = self.input.forward(tokens);
        if self.use_positions {
            let pos = self.positions.view2();
            for b in 0..batch {
                let mut rows = x.slice_mut(s![b * seq_len..(b + 1) * seq_len, ..]);
                rows += &pos.slice(s![..seq_len, ..]);
            }
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, c) = layer.forward(&x, batch, seq_len);
            caches.push(c);
            x = y;
        }
        let (z, final_norm) = self.final_norm.forward(x.view());
        let pooled = z
            .into_shape_with_order((batch, seq_len, self.channels()))
            .expect("contiguous rows")
            .mean_axis(Axis(1))
            .expect("non-empty sequence");
        Ok((
            pooled,
            TransformerCache {
                batch,
                seq_len,
                tokens: tokens.to_owned(),
                layers: caches,
                final_norm,
            },
        ))
    }

    /// Accumulate parameter gradients from `dpooled` (`[batch, C]`).
    pub fn backward(&mut self, cache: &TransformerCache, dpooled: &Array2<f64>) {
        let (b, t, c) = (cache.batch, cache.seq_len, self.channels());
        let mut dz = Array2::zeros((b * t, c));
        for i in 0..b {
            let row = dpooled.row(i).mapv(|v| v / t as f64);
            for j in 0..t {
                dz.row_mut(i * t + j).assign(&row);
            }
        }
        let mut dx = self.final_norm.backward(&cache.final_norm, dz.view());
        for (layer, lc) in self.layers.iter_mut().zip(&cache.layers).rev() {
            dx = layer.backward(lc, &dx);
        }
        if self.use_positions {
            let mut g = self.positions.grad_view2_mut();
            for i in 0..b {
                let mut rows = g.slice_mut(s![..t, ..]);
                rows += &dx.slice(s![i * t..(i + 1) * t, ..]);
            }
        }
        self.input.backward(cache.tokens.view(), dx.view());
    }
}

impl Parameterized for TemporalTransformer {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
        visit_child("input", &self.input, f);
        f("positions", &self.positions);
        for (i, l) in self.layers.iter().enumerate() {
            visit_child(&format!("layer{i}"), l, f);
        }
        visit_child("final_norm", &self.final_norm, f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        visit_child_mut("input", &mut self.input, f);
        f("positions", &mut self.positions);
        for (i, l) in self.layers.iter_mut().enumerate() {
            visit_child_mut(&format!("layer{i}"), l, f);
        }
        visit_child_mut("final_norm", &mut self.final_norm, f);
    }
}

pub fn temporal_transform(seq: &EmbeddingSequence, transformer: &TemporalTransformer) -> Result<GlobalFeature> {
    let (pooled, _) = transformer.forward(seq.tokens.view(), 1, seq.len())?;
    Ok(GlobalFeature {
        vector: pooled.row(0).to_owned(),
    })
}
