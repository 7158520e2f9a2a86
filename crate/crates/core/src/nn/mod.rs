//! Minimal f64 layer kit with hand-written backward passes.
//!
//! Layers are plain structs holding [`Param`]s. `forward` takes `&self` and
//! returns the output together with whatever the backward pass needs;
//! `backward` takes `&mut self`, accumulates parameter gradients and returns
//! the input gradient. Composite models implement [`Parameterized`] so that
//! optimizers, checkpoints and fingerprints can walk their parameters by name.

mod activation;
mod adam;
mod attention;
mod conv;
mod linear;
mod norm;

pub use activation::{gelu, gelu_backward, relu, relu_backward, sigmoid};
pub use adam::Adam;
pub use attention::{AttentionCache, MultiHeadAttention};
pub use conv::{global_avg_pool, global_avg_pool_backward, upsample2x, upsample2x_backward, Conv2d, ConvCache};
pub use linear::Linear;
pub use norm::{BatchNorm1d, BatchNormCache, LayerNorm, LayerNormCache};

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

pub type Rng64 = rand_chacha::ChaCha8Rng;

/// Normalization behaviour: batch statistics while training, running
/// statistics at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    /// Non-trainable params (running statistics) are skipped by the optimizer.
    pub trainable: bool,
    pub(crate) m: Vec<f64>,
    pub(crate) v: Vec<f64>,
}

impl Param {
    pub fn from_vec(shape: Vec<usize>, value: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "param shape/data mismatch");
        let n = value.len();
        Self {
            shape,
            value,
            grad: vec![0.0; n],
            trainable: true,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, fill: f64) -> Self {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![fill; n])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn uniform(shape: Vec<usize>, bound: f64, rng: &mut Rng64) -> Self {
        let n = shape.iter().product();
        let value = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        Self::from_vec(shape, value)
    }

    pub fn normal(shape: Vec<usize>, std: f64, rng: &mut Rng64) -> Self {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std must be finite and positive");
        let value = (0..n).map(|_| dist.sample(rng)).collect();
        Self::from_vec(shape, value)
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn view1(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.value[..])
    }

    pub fn view2(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.shape[0], self.len() / self.shape[0]), &self.value)
            .expect("contiguous param")
    }

    pub fn grad_view2_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        let rows = self.shape[0];
        let cols = self.grad.len() / rows;
        ArrayViewMut2::from_shape((rows, cols), &mut self.grad).expect("contiguous grad")
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

pub trait Parameterized {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param));
}

/// Visit `child`'s params with names prefixed by `prefix.`.
pub fn visit_child(prefix: &str, child: &dyn Parameterized, f: &mut dyn FnMut(&str, &Param)) {
    child.visit_params(&mut |n, p| f(&format!("{prefix}.{n}"), p));
}

pub fn visit_child_mut(
    prefix: &str,
    child: &mut dyn Parameterized,
    f: &mut dyn FnMut(&str, &mut Param),
) {
    child.visit_params_mut(&mut |n, p| f(&format!("{prefix}.{n}"), p));
}

pub fn zero_grad(model: &mut dyn Parameterized) {
    model.visit_params_mut(&mut |_, p| p.zero_grad());
}

pub fn param_count(model: &dyn Parameterized) -> usize {
    let mut n = 0;
    model.visit_params(&mut |_, p| n += p.len());
    n
}

/// SHA-256 over parameter names, shapes and exact value bits.
pub fn fingerprint(model: &dyn Parameterized) -> String {
    let mut hasher = Sha256::new();
    model.visit_params(&mut |name, p| {
        hasher.update(name.as_bytes());
        for d in &p.shape {
            hasher.update((*d as u64).to_le_bytes());
        }
        for v in &p.value {
            hasher.update(v.to_bits().to_le_bytes());
        }
    });
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Copy parameter values (not optimizer state) from `src` into `dst`.
pub fn copy_values(src: &dyn Parameterized, dst: &mut dyn Parameterized) {
    let mut values = Vec::new();
    src.visit_params(&mut |_, p| values.push(p.value.clone()));
    let mut it = values.into_iter();
    dst.visit_params_mut(&mut |_, p| {
        p.value = it.next().expect("models have identical structure");
    });
}
