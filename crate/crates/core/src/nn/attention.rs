use ndarray::{s, Array2, Array4, ArrayView2, Axis};

use super::{visit_child, visit_child_mut, Linear, Param, Parameterized, Rng64};

/// Multi-head self-attention over `batch` sequences of `seq_len` tokens,
/// with tokens laid out as rows of a `[batch·seq_len, dim]` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

pub struct AttentionCache {
    batch: usize,
    seq_len: usize,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// `[batch, heads, seq, seq]` softmax weights
    attn: Array4<f64>,
    context: Array2<f64>,
}

impl MultiHeadAttention {
    pub fn new(dim: usize, heads: usize, rng: &mut Rng64) -> Self {
        assert_eq!(dim % heads, 0, "dim must be divisible by heads");
        Self {
            query: Linear::new(dim, dim, true, rng),
            key: Linear::new(dim, dim, true, rng),
            value: Linear::new(dim, dim, true, rng),
            output: Linear::new(dim, dim, true, rng),
            heads,
        }
    }

    fn head_dim(&self) -> usize {
        self.query.out_dim() / self.heads
    }

    pub fn forward(
        &self,
        x: ArrayView2<'_, f64>,
        batch: usize,
        seq_len: usize,
    ) -> (Array2<f64>, AttentionCache) {
        let q = self.query.forward(x);
        let k = self.key.forward(x);
        let v = self.value.forward(x);
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attn = Array4::zeros((batch, self.heads, seq_len, seq_len));
        let mut context = Array2::zeros(q.raw_dim());
        for b in 0..batch {
            let rows = b * seq_len..(b + 1) * seq_len;
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = q.slice(s![rows.clone(), cols.clone()]);
                let kh = k.slice(s![rows.clone(), cols.clone()]);
                let vh = v.slice(s![rows.clone(), cols.clone()]);
                let mut scores = qh.dot(&kh.t()) * scale;
                for mut row in scores.axis_iter_mut(Axis(0)) {
                    let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    row.mapv_inplace(|s| (s - max).exp());
                    let sum = row.sum();
                    row /= sum;
                }
                context
                    .slice_mut(s![rows.clone(), cols])
                    .assign(&scores.dot(&vh));
                attn.slice_mut(s![b, h, .., ..]).assign(&scores);
            }
        }
        let y = self.output.forward(context.view());
        (
            y,
            AttentionCache {
                batch,
                seq_len,
                q,
                k,
                v,
                attn,
                context,
            },
        )
    }

    pub fn backward(
        &mut self,
        x: ArrayView2<'_, f64>,
        cache: &AttentionCache,
        dy: ArrayView2<'_, f64>,
    ) -> Array2<f64> {
        let dcontext = self.output.backward(cache.context.view(), dy);
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        let t = cache.seq_len;
        for b in 0..cache.batch {
            let rows = b * t..(b + 1) * t;
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                let a = cache.attn.slice(s![b, h, .., ..]);
                let dctx = dcontext.slice(s![rows.clone(), cols.clone()]);
                let vh = cache.v.slice(s![rows.clone(), cols.clone()]);
                let qh = cache.q.slice(s![rows.clone(), cols.clone()]);
                let kh = cache.k.slice(s![rows.clone(), cols.clone()]);
                let da = dctx.dot(&vh.t());
                dv.slice_mut(s![rows.clone(), cols.clone()])
                    .assign(&a.t().dot(&dctx));
                let row_dot = (&da * &a).sum_axis(Axis(1));
                let ds = (&da - &row_dot.insert_axis(Axis(1))) * &a * scale;
                dq.slice_mut(s![rows.clone(), cols.clone()])
                    .assign(&ds.dot(&kh));
                dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qh));
            }
        }
        let mut dx = self.query.backward(x, dq.view());
        dx += &self.key.backward(x, dk.view());
        dx += &self.value.backward(x, dv.view());
        dx
    }
}

impl Parameterized for MultiHeadAttention {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
        visit_child("query", &self.query, f);
        visit_child("key", &self.key, f);
        visit_child("value", &self.value, f);
        visit_child("output", &self.output, f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        visit_child_mut("query", &mut self.query, f);
        visit_child_mut("key", &mut self.key, f);
        visit_child_mut("value", &mut self.value, f);
        visit_child_mut("output", &mut self.output, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng64::seed_from_u64(21);
        let mut mha = MultiHeadAttention::new(8, 2, &mut rng);
        let (batch, t) = (2, 3);
        let x = Array2::from_shape_fn((batch * t, 8), |_| rng.random_range(-1.0..1.0));
        let dy = Array2::from_shape_fn((batch * t, 8), |_| rng.random_range(-1.0..1.0));
        let (_, cache) = mha.forward(x.view(), batch, t);
        let dx = mha.backward(x.view(), &cache, dy.view());
        let loss = |m: &MultiHeadAttention, x: &Array2<f64>| (&m.forward(x.view(), batch, t).0 * &dy).sum();
        let h = 1e-6;
        for (i, j) in [(0, 0), (2, 5), (5, 7), (3, 1)] {
            let mut xp = x.clone();
            xp[[i, j]] += h;
            let mut xm = x.clone();
            xm[[i, j]] -= h;
            let fd = (loss(&mha, &xp) - loss(&mha, &xm)) / (2.0 * h);
            assert!((fd - dx[[i, j]]).abs() < 1e-7, "{fd} vs {}", dx[[i, j]]);
        }
        for idx in [0, 13, 63] {
            let mut mp = mha.clone();
            mp.key.weight.value[idx] += h;
            let mut mm = mha.clone();
            mm.key.weight.value[idx] -= h;
            let fd = (loss(&mp, &x) - loss(&mm, &x)) / (2.0 * h);
            assert!((fd - mha.key.weight.grad[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = Rng64::seed_from_u64(2);
        let mha = MultiHeadAttention::new(8, 4, &mut rng);
        let x = Array2::from_shape_fn((7, 8), |_| rng.random_range(-3.0..3.0));
        let (_, cache) = mha.forward(x.view(), 1, 7);
        for row in cache.attn.lanes(Axis(3)) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
