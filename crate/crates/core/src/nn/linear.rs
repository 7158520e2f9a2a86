use ndarray::{Array2, ArrayView2, Axis};

use super::{Param, Parameterized, Rng64};

/// `y = x Wᵀ + b` over row-major batches `[N, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[out, in]`
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    /// Uniform init in `±1/sqrt(in_dim)`.
    pub fn new(in_dim: usize, out_dim: usize, bias: bool, rng: &mut Rng64) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = Param::uniform(vec![out_dim, in_dim], bound, rng);
        let bias = bias.then(|| Param::uniform(vec![out_dim], bound, rng));
        Self { weight, bias }
    }

    pub fn zeros(in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self {
            weight: Param::zeros(vec![out_dim, in_dim]),
            bias: bias.then(|| Param::zeros(vec![out_dim])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.view2().t());
        if let Some(b) = &self.bias {
            y += &b.view1();
        }
        y
    }

    /// `x` is the forward input. Accumulates grads and returns `dx`.
    pub fn backward(&mut self, x: ArrayView2<'_, f64>, dy: ArrayView2<'_, f64>) -> Array2<f64> {
        let dx = dy.dot(&self.weight.view2());
        let dw = dy.t().dot(&x);
        self.weight.grad_view2_mut().scaled_add(1.0, &dw);
        if let Some(b) = &mut self.bias {
            for (g, d) in b.grad.iter_mut().zip(dy.sum_axis(Axis(0))) {
                *g += d;
            }
        }
        dx
    }
}

impl Parameterized for Linear {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
        f("weight", &self.weight);
        if let Some(b) = &self.bias {
            f("bias", b);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("weight", &mut self.weight);
        if let Some(b) = &mut self.bias {
            f("bias", b);
        }
    }
}
