use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::{Mode, Param, Parameterized};

pub const NORM_EPS: f64 = 1e-5;

/// Per-row normalization over the last axis of `[M, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::filled(vec![dim], 1.0),
            beta: Param::zeros(vec![dim]),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mean = x.sum_axis(Axis(1)) / d;
        let centered = &x - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
        let xhat = centered * &inv_std.view().insert_axis(Axis(1));
        let y = &xhat * &self.gamma.view1() + &self.beta.view1();
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: ArrayView2<'_, f64>) -> Array2<f64> {
        let d = dy.ncols() as f64;
        for (g, v) in self.gamma.grad.iter_mut().zip((&dy * &cache.xhat).sum_axis(Axis(0))) {
            *g += v;
        }
        for (g, v) in self.beta.grad.iter_mut().zip(dy.sum_axis(Axis(0))) {
            *g += v;
        }
        let dxhat = &dy * &self.gamma.view1();
        let sum_dxhat = dxhat.sum_axis(Axis(1));
        let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1));
        let mut dx = dxhat * d;
        dx -= &sum_dxhat.view().insert_axis(Axis(1));
        dx -= &(&cache.xhat * &sum_dxhat_xhat.view().insert_axis(Axis(1)));
        dx * &(cache.inv_std.mapv(|s| s / d)).view().insert_axis(Axis(1))
    }
}

impl Parameterized for LayerNorm {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
        f("gamma", &self.gamma);
        f("beta", &self.beta);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("gamma", &mut self.gamma);
        f("beta", &mut self.beta);
    }
}

/// Batch normalization over features of `[N, F]` with running statistics.
///
/// Running statistics follow `running = momentum·running + (1−momentum)·batch`
/// and are only changed by [`BatchNorm1d::update_running`].
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm1d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f64,
}

pub struct BatchNormCache {
    mode: Mode,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    batch_mean: Array1<f64>,
    batch_var_unbiased: Option<Array1<f64>>,
}

impl BatchNorm1d {
    pub fn new(features: usize, momentum: f64) -> Self {
        Self {
            gamma: Param::filled(vec![features], 1.0),
            beta: Param::zeros(vec![features]),
            running_mean: Param::zeros(vec![features]).frozen(),
            running_var: Param::filled(vec![features], 1.0).frozen(),
            momentum,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    /// Index of the first running variance that is not strictly positive.
    pub fn nonpositive_variance(&self) -> Option<usize> {
        self.running_var.value.iter().position(|v| !(*v > 0.0))
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>, mode: Mode) -> (Array2<f64>, BatchNormCache) {
        let n = x.nrows() as f64;
        let (mean, var, unbiased) = match mode {
            Mode::Train => {
                let mean = x.sum_axis(Axis(0)) / n;
                let sq = (&x - &mean).mapv(|v| v * v).sum_axis(Axis(0));
                let var = &sq / n;
                let unbiased = (x.nrows() > 1).then(|| sq / (n - 1.0));
                (mean, var, unbiased)
            }
            Mode::Eval => (
                self.running_mean.view1().to_owned(),
                self.running_var.view1().to_owned(),
                None,
            ),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
        let xhat = (&x - &mean) * &inv_std;
        let y = &xhat * &self.gamma.view1() + &self.beta.view1();
        (
            y,
            BatchNormCache {
                mode,
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var_unbiased: unbiased,
            },
        )
    }

    pub fn backward(&mut self, cache: &BatchNormCache, dy: ArrayView2<'_, f64>) -> Array2<f64> {
        for (g, v) in self.gamma.grad.iter_mut().zip((&dy * &cache.xhat).sum_axis(Axis(0))) {
            *g += v;
        }
        for (g, v) in self.beta.grad.iter_mut().zip(dy.sum_axis(Axis(0))) {
            *g += v;
        }
        let dxhat = &dy * &self.gamma.view1();
        match cache.mode {
            Mode::Eval => dxhat * &cache.inv_std,
            Mode::Train => {
                let n = dy.nrows() as f64;
                let sum_dxhat = dxhat.sum_axis(Axis(0));
                let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));
                let dx = dxhat * n - &sum_dxhat - &(&cache.xhat * &sum_dxhat_xhat);
                dx * &cache.inv_std.mapv(|s| s / n)
            }
        }
    }

    /// Fold a TRAIN-mode batch's statistics into the running estimates.
    pub fn update_running(&mut self, cache: &BatchNormCache) {
        let Some(var) = &cache.batch_var_unbiased else {
            return;
        };
        let m = self.momentum;
        for (r, b) in self.running_mean.value.iter_mut().zip(&cache.batch_mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.running_var.value.iter_mut().zip(var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

impl Parameterized for BatchNorm1d {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
        f("gamma", &self.gamma);
        f("beta", &self.beta);
        f("running_mean", &self.running_mean);
        f("running_var", &self.running_var);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("gamma", &mut self.gamma);
        f("beta", &mut self.beta);
        f("running_mean", &mut self.running_mean);
        f("running_var", &mut self.running_var);
    }
}
