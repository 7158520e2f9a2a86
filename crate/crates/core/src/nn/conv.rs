use ndarray::{s, Array2, Array4, ArrayView4, Axis};

use super::{Param, Parameterized, Rng64};

/// 2D convolution over NCHW batches, lowered to one GEMM via im2col.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    /// `[out, in, k, k]`
    pub weight: Param,
    pub bias: Param,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

pub struct ConvCache {
    cols: Array2<f64>,
    input_dim: (usize, usize, usize, usize),
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng64,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        Self {
            weight: Param::uniform(vec![out_ch, in_ch, kernel, kernel], bound, rng),
            bias: Param::zeros(vec![out_ch]),
            kernel,
            stride,
            padding,
        }
    }

    pub fn zeroed(mut self) -> Self {
        self.weight.value.iter_mut().for_each(|w| *w = 0.0);
        self.bias.value.iter_mut().for_each(|b| *b = 0.0);
        self
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: ArrayView4<'_, f64>) -> (Array4<f64>, ConvCache) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "conv input channels");
        let (ho, wo) = self.output_size(h, w);
        let cols = self.im2col(x);
        let mut out = self.weight.view2().dot(&cols);
        for (mut row, b) in out.axis_iter_mut(Axis(0)).zip(&self.bias.value) {
            row += *b;
        }
        let cout = self.out_channels();
        let y = out
            .into_shape_with_order((cout, n, ho, wo))
            .expect("gemm output is contiguous")
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned();
        (
            y,
            ConvCache {
                cols,
                input_dim: (n, c, h, w),
            },
        )
    }

    pub fn backward(&mut self, cache: &ConvCache, dy: ArrayView4<'_, f64>) -> Array4<f64> {
        let (n, cout, ho, wo) = dy.dim();
        let dy2 = dy
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((cout, n * ho * wo))
            .expect("contiguous");
        let dw = dy2.dot(&cache.cols.t());
        self.weight.grad_view2_mut().scaled_add(1.0, &dw);
        for (g, row) in self.bias.grad.iter_mut().zip(dy2.axis_iter(Axis(0))) {
            *g += row.sum();
        }
        let dcols = self.weight.view2().t().dot(&dy2);
        self.col2im(&dcols, cache.input_dim)
    }

    fn im2col(&self, x: ArrayView4<'_, f64>) -> Array2<f64> {
        let (n, c, h, w) = x.dim();
        let (ho, wo) = self.output_size(h, w);
        let k = self.kernel;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let plane = ho * wo;
        let mut cols = Array2::<f64>::zeros((c * k * k, n * plane));
        let cs = cols.as_slice_mut().expect("fresh array");
        let row_len = n * plane;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst_row = &mut cs[row * row_len..(row + 1) * row_len];
                    for ni in 0..n {
                        let src = &xs[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                        let dst = &mut dst_row[ni * plane..(ni + 1) * plane];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                            let dst_o = &mut dst[oy * wo..(oy + 1) * wo];
                            for (ox, d) in dst_o.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix >= 0 && ix < w as isize {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<f64>, dim: (usize, usize, usize, usize)) -> Array4<f64> {
        let (n, c, h, w) = dim;
        let (ho, wo) = self.output_size(h, w);
        let k = self.kernel;
        let plane = ho * wo;
        let row_len = n * plane;
        let mut dx = Array4::<f64>::zeros((n, c, h, w));
        let ds = dcols.as_slice().expect("gemm output is contiguous");
        let xs = dx.as_slice_mut().expect("fresh array");
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src_row = &ds[row * row_len..(row + 1) * row_len];
                    for ni in 0..n {
                        let dst = &mut xs[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                        let src = &src_row[ni * plane..(ni + 1) * plane];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                            for (ox, v) in src[oy * wo..(oy + 1) * wo].iter().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst_row[ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

impl Parameterized for Conv2d {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
        f("weight", &self.weight);
        f("bias", &self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
    }
}

/// Nearest-neighbour ×2 upsampling cropped to `(out_h, out_w)`.
pub fn upsample2x(x: ArrayView4<'_, f64>, out_h: usize, out_w: usize) -> Array4<f64> {
    let (n, c, _, _) = x.dim();
    Array4::from_shape_fn((n, c, out_h, out_w), |(a, b, y, z)| x[[a, b, y / 2, z / 2]])
}

pub fn upsample2x_backward(dy: ArrayView4<'_, f64>, in_h: usize, in_w: usize) -> Array4<f64> {
    let (n, c, oh, ow) = dy.dim();
    let mut dx = Array4::zeros((n, c, in_h, in_w));
    for a in 0..n {
        for b in 0..c {
            for y in 0..oh {
                for z in 0..ow {
                    dx[[a, b, y / 2, z / 2]] += dy[[a, b, y, z]];
                }
            }
        }
    }
    dx
}

/// Mean over spatial axes: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool(x: ArrayView4<'_, f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let scale = 1.0 / (h * w) as f64;
    Array2::from_shape_fn((n, c), |(a, b)| x.slice(s![a, b, .., ..]).sum() * scale)
}

pub fn global_avg_pool_backward(dy: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (n, c) = dy.dim();
    let scale = 1.0 / (h * w) as f64;
    Array4::from_shape_fn((n, c, h, w), |(a, b, _, _)| dy[[a, b]] * scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Direct nested-loop convolution used as an oracle.
    fn naive_conv(conv: &Conv2d, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let (ho, wo) = conv.output_size(h, w);
        let k = conv.kernel;
        let cout = conv.out_channels();
        let wt = &conv.weight.value;
        Array4::from_shape_fn((n, cout, ho, wo), |(ni, co, oy, ox)| {
            let mut acc = conv.bias.value[co];
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                        let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += wt[((co * c + ci) * k + ky) * k + kx]
                                * x[[ni, ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    fn random_input(rng: &mut Rng64, dim: (usize, usize, usize, usize)) -> Array4<f64> {
        use rand::Rng;
        Array4::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn forward_matches_naive_loops() {
        let mut rng = Rng64::seed_from_u64(3);
        for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
            let mut conv = Conv2d::new(3, 4, 3, stride, pad, &mut rng);
            conv.bias = Param::uniform(vec![4], 0.5, &mut rng);
            let x = random_input(&mut rng, (2, 3, 7, 6));
            let (y, _) = conv.forward(x.view());
            let oracle = naive_conv(&conv, &x);
            assert_eq!(y.dim(), oracle.dim());
            for (a, b) in y.iter().zip(oracle.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng64::seed_from_u64(5);
        let mut conv = Conv2d::new(2, 3, 3, 2, 1, &mut rng);
        let x = random_input(&mut rng, (2, 2, 5, 5));
        let (y, cache) = conv.forward(x.view());
        let dy = random_input(&mut rng, y.dim());
        let dx = conv.backward(&cache, dy.view());
        let loss = |conv: &Conv2d, x: &Array4<f64>| (naive_conv(conv, x) * &dy).sum();
        let h = 1e-6;
        for idx in [[0, 0, 0, 0], [1, 1, 2, 3], [0, 1, 4, 4]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-6, "dx{idx:?}: {fd} vs {}", dx[idx]);
        }
        for i in [0, 7, 20, conv.weight.len() - 1] {
            let mut cp = conv.clone();
            cp.weight.value[i] += h;
            let mut cm = conv.clone();
            cm.weight.value[i] -= h;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            assert!((fd - conv.weight.grad[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let mut rng = Rng64::seed_from_u64(1);
        let x = random_input(&mut rng, (1, 2, 3, 3));
        let dy = random_input(&mut rng, (1, 2, 5, 6));
        let y = upsample2x(x.view(), 5, 6);
        let dx = upsample2x_backward(dy.view(), 3, 3);
        let lhs = (&y * &dy).sum();
        let rhs = (&x * &dx).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
