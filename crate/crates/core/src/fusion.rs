//! Channel-attention fusion of the local and global features.
//!
//! The gate looks at the element-wise sum `s = f_local + f_glob`:
//!
//! ```text
//! ρ   = sigmoid(BN₂(W₂ · ReLU(BN₁(W₁ · s))))
//! f_a = ρ ⊙ f_local + (1 − ρ) ⊙ f_glob
//! ```
//!
//! `W₁` is `(C/r)×C` and `W₂` is `C×(C/r)`; neither carries a bias since a
//! normalization layer follows each. A linear head maps `f_a` to the
//! probability that the clip is FAKE.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::global_branch::GlobalFeature;
use crate::local_branch::LocalFeature;
use crate::nn::{
    relu, relu_backward, sigmoid, visit_child, visit_child_mut, BatchNorm1d, BatchNormCache,
    Linear, Mode, Param, Parameterized, Rng64,
};

pub const DEFAULT_REDUCTION_RATIO: usize = 4;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.9;
/// Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-7;
/// Gate logits are clamped to this magnitude so that `ρ` stays strictly
/// inside (0, 1) in double precision.
pub const GATE_LOGIT_LIMIT: f64 = 36.0;
/// Decision threshold; a probability equal to it counts as FAKE.
pub const DECISION_THRESHOLD: f64 = 0.5;

/// Per-channel gate weights, every entry in the open interval (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGate {
    pub rho: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeature {
    pub vector: Array1<f64>,
}

/// Parameters of the channel-attention gate.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub w1: Linear,
    pub bn1: BatchNorm1d,
    pub w2: Linear,
    pub bn2: BatchNorm1d,
    pub reduction_ratio: usize,
}

pub struct GateCache {
    s: Array2<f64>,
    bn1: BatchNormCache,
    z1: Array2<f64>,
    a1: Array2<f64>,
    bn2: BatchNormCache,
    rho: Array2<f64>,
}

impl FusionParams {
    pub fn new(channels: usize, reduction_ratio: usize, rng: &mut Rng64) -> Result<Self> {
        let hidden = Self::hidden_width(channels, reduction_ratio)?;
        Ok(Self {
            w1: Linear::new(channels, hidden, false, rng),
            bn1: BatchNorm1d::new(hidden, DEFAULT_BN_MOMENTUM),
            w2: Linear::new(hidden, channels, false, rng),
            bn2: BatchNorm1d::new(channels, DEFAULT_BN_MOMENTUM),
            reduction_ratio,
        })
    }

    /// Zero weights and identity normalization: the gate outputs 0.5 everywhere.
    pub fn zeroed(channels: usize, reduction_ratio: usize) -> Result<Self> {
        let hidden = Self::hidden_width(channels, reduction_ratio)?;
        Ok(Self {
            w1: Linear::zeros(channels, hidden, false),
            bn1: BatchNorm1d::new(hidden, DEFAULT_BN_MOMENTUM),
            w2: Linear::zeros(hidden, channels, false),
            bn2: BatchNorm1d::new(channels, DEFAULT_BN_MOMENTUM),
            reduction_ratio,
        })
    }

    fn hidden_width(channels: usize, r: usize) -> Result<usize> {
        if r == 0 || channels % r != 0 || channels / r == 0 {
            return Err(Error::Precondition(format!(
                "reduction ratio {r} must divide channel count {channels}"
            )));
        }
        Ok(channels / r)
    }

    pub fn channels(&self) -> usize {
        self.w1.in_dim()
    }

    pub fn hidden(&self) -> usize {
        self.w1.out_dim()
    }

    fn check_variances(&self) -> Result<()> {
        if let Some(i) = self.bn1.nonpositive_variance() {
            return Err(Error::NonPositiveVariance(i));
        }
        if let Some(i) = self.bn2.nonpositive_variance() {
            return Err(Error::NonPositiveVariance(self.hidden() + i));
        }
        Ok(())
    }

    /// Batched gate: rows of `f_local` and `f_glob` are samples.
    pub fn forward(
        &self,
        f_local: ArrayView2<'_, f64>,
        f_glob: ArrayView2<'_, f64>,
        mode: Mode,
    ) -> Result<(Array2<f64>, GateCache)> {
        let c = self.channels();
        if f_local.dim() != f_glob.dim() {
            return Err(Error::DimensionMismatch(f_local.ncols(), f_glob.ncols()));
        }
        if f_local.ncols() != c {
            return Err(Error::DimensionMismatch(f_local.ncols(), c));
        }
        if mode == Mode::Eval {
            self.check_variances()?;
        }
        let s = &f_local + &f_glob;
        let u1 = self.w1.forward(s.view());
        let (z1, bn1) = self.bn1.forward(u1.view(), mode);
        let a1 = relu(&z1);
        let u2 = self.w2.forward(a1.view());
        let (z2, bn2) = self.bn2.forward(u2.view(), mode);
        let rho = z2.mapv(|z| sigmoid(z.clamp(-GATE_LOGIT_LIMIT, GATE_LOGIT_LIMIT)));
        Ok((
            rho.clone(),
            GateCache {
                s,
                bn1,
                z1,
                a1,
                bn2,
                rho,
            },
        ))
    }

    /// Returns the gradient w.r.t. `s`, which is also the gradient w.r.t.
    /// each of `f_local` and `f_glob` through the gate.
    pub fn backward(&mut self, cache: &GateCache, drho: ArrayView2<'_, f64>) -> Array2<f64> {
        let dz2 = Zip::from(&drho)
            .and(&cache.rho)
            .map_collect(|&g, &r| g * r * (1.0 - r));
        let du2 = self.bn2.backward(&cache.bn2, dz2.view());
        let da1 = self.w2.backward(cache.a1.view(), du2.view());
        let dz1 = relu_backward(&cache.z1, &da1);
        let du1 = self.bn1.backward(&cache.bn1, dz1.view());
        self.w1.backward(cache.s.view(), du1.view())
    }

    pub fn update_running(&mut self, cache: &GateCache) {
        self.bn1.update_running(&cache.bn1);
        self.bn2.update_running(&cache.bn2);
    }
}

impl Parameterized for FusionParams {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
        visit_child("w1", &self.w1, f);
        visit_child("bn1", &self.bn1, f);
        visit_child("w2", &self.w2, f);
        visit_child("bn2", &self.bn2, f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        visit_child_mut("w1", &mut self.w1, f);
        visit_child_mut("bn1", &mut self.bn1, f);
        visit_child_mut("w2", &mut self.w2, f);
        visit_child_mut("bn2", &mut self.bn2, f);
    }
}

/// Single-sample gate. In TRAIN mode the "batch" is this one sample.
pub fn channel_attention(
    f_local: &LocalFeature,
    f_glob: &GlobalFeature,
    params: &FusionParams,
    mode: Mode,
) -> Result<AttentionGate> {
    let (rho, _) = params.forward(
        f_local.vector.view().insert_axis(Axis(0)),
        f_glob.vector.view().insert_axis(Axis(0)),
        mode,
    )?;
    Ok(AttentionGate {
        rho: rho.row(0).to_owned(),
    })
}

pub fn fuse(f_local: &LocalFeature, f_glob: &GlobalFeature, gate: &AttentionGate) -> Result<FusedFeature> {
    let c = f_local.vector.len();
    if f_glob.vector.len() != c {
        return Err(Error::DimensionMismatch(c, f_glob.vector.len()));
    }
    if gate.rho.len() != c {
        return Err(Error::DimensionMismatch(c, gate.rho.len()));
    }
    let vector = Zip::from(&gate.rho)
        .and(&f_local.vector)
        .and(&f_glob.vector)
        .map_collect(|&r, &l, &g| r * l + (1.0 - r) * g);
    Ok(FusedFeature { vector })
}

pub fn fuse_batch(
    f_local: ArrayView2<'_, f64>,
    f_glob: ArrayView2<'_, f64>,
    rho: ArrayView2<'_, f64>,
) -> Array2<f64> {
    Zip::from(&rho)
        .and(&f_local)
        .and(&f_glob)
        .map_collect(|&r, &l, &g| r * l + (1.0 - r) * g)
}

/// Gradients of the fused feature w.r.t. `(f_local, f_glob, ρ)`.
pub fn fuse_backward(
    f_local: ArrayView2<'_, f64>,
    f_glob: ArrayView2<'_, f64>,
    rho: ArrayView2<'_, f64>,
    dfused: ArrayView2<'_, f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let dlocal = &dfused * &rho;
    let dglob = &dfused * &rho.mapv(|r| 1.0 - r);
    let drho = &dfused * &(&f_local - &f_glob);
    (dlocal, dglob, drho)
}

/// Linear layer `C → 1` followed by a sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub linear: Linear,
}

impl ClassifierHead {
    pub fn new(channels: usize, rng: &mut Rng64) -> Self {
        Self {
            linear: Linear::new(channels, 1, true, rng),
        }
    }

    pub fn zeroed(channels: usize) -> Self {
        Self {
            linear: Linear::zeros(channels, 1, true),
        }
    }

    pub fn channels(&self) -> usize {
        self.linear.in_dim()
    }

    /// FAKE probabilities for each row of `features`.
    pub fn forward(&self, features: ArrayView2<'_, f64>) -> Array1<f64> {
        self.linear
            .forward(features)
            .index_axis(Axis(1), 0)
            .mapv(sigmoid)
    }

    /// `dlogits` is the loss gradient w.r.t. the pre-sigmoid logits.
    pub fn backward(&mut self, features: ArrayView2<'_, f64>, dlogits: ArrayView1<'_, f64>) -> Array2<f64> {
        let dy = dlogits.insert_axis(Axis(1));
        self.linear.backward(features, dy)
    }
}

impl Parameterized for ClassifierHead {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
        visit_child("linear", &self.linear, f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        visit_child_mut("linear", &mut self.linear, f);
    }
}

pub fn classify(f_a: &FusedFeature, head: &ClassifierHead) -> f64 {
    head.forward(f_a.vector.view().insert_axis(Axis(0)))[0]
}

/// Mean binary cross-entropy with probabilities clamped to `[ε, 1−ε]`.
pub fn detector_loss(probabilities: &[f64], labels: &[f64]) -> Result<f64> {
    if probabilities.len() != labels.len() {
        return Err(Error::LengthMismatch(probabilities.len(), labels.len()));
    }
    if probabilities.is_empty() {
        return Err(Error::EmptySequence);
    }
    if let Some(bad) = labels.iter().find(|y| **y != 0.0 && **y != 1.0) {
        return Err(Error::Precondition(format!("label {bad} is not 0 or 1")));
    }
    let total: f64 = probabilities
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / probabilities.len() as f64)
}

/// Gradient of [`detector_loss`] w.r.t. the logits behind `probabilities`.
pub fn detector_loss_logit_grad(probabilities: &[f64], labels: &[f64]) -> Array1<f64> {
    let n = probabilities.len() as f64;
    probabilities
        .iter()
        .zip(labels)
        .map(|(p, y)| (p - y) / n)
        .collect()
}

/// Channel-attention fusion followed by the classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionClassifier {
    pub gate: FusionParams,
    pub head: ClassifierHead,
}

pub struct FusionClassifierCache {
    f_local: Array2<f64>,
    f_glob: Array2<f64>,
    gate: GateCache,
    rho: Array2<f64>,
    fused: Array2<f64>,
}

impl FusionClassifier {
    pub fn new(channels: usize, reduction_ratio: usize, rng: &mut Rng64) -> Result<Self> {
        Ok(Self {
            gate: FusionParams::new(channels, reduction_ratio, rng)?,
            head: ClassifierHead::new(channels, rng),
        })
    }

    pub fn forward(
        &self,
        f_local: ArrayView2<'_, f64>,
        f_glob: ArrayView2<'_, f64>,
        mode: Mode,
    ) -> Result<(Array1<f64>, FusionClassifierCache)> {
        let (rho, gate) = self.gate.forward(f_local, f_glob, mode)?;
        let fused = fuse_batch(f_local, f_glob, rho.view());
        let probs = self.head.forward(fused.view());
        Ok((
            probs,
            FusionClassifierCache {
                f_local: f_local.to_owned(),
                f_glob: f_glob.to_owned(),
                gate,
                rho,
                fused,
            },
        ))
    }

    /// Back-propagate logit gradients; returns `(d f_local, d f_glob)`.
    pub fn backward(
        &mut self,
        cache: &FusionClassifierCache,
        dlogits: ArrayView1<'_, f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let dfused = self.head.backward(cache.fused.view(), dlogits);
        let (mut dlocal, mut dglob, drho) = fuse_backward(
            cache.f_local.view(),
            cache.f_glob.view(),
            cache.rho.view(),
            dfused.view(),
        );
        let ds = self.gate.backward(&cache.gate, drho.view());
        dlocal += &ds;
        dglob += &ds;
        (dlocal, dglob)
    }

    pub fn update_running(&mut self, cache: &FusionClassifierCache) {
        self.gate.update_running(&cache.gate);
    }
}

impl Parameterized for FusionClassifier {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
        visit_child("gate", &self.gate, f);
        visit_child("head", &self.head, f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        visit_child_mut("gate", &mut self.gate, f);
        visit_child_mut("head", &mut self.head, f);
    }
}
