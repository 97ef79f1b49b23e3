//! 2-D convolution (stride 1) via im2col + GEMM.
//!
//! The unfolded matrix is kept transposed, `(c*kh*kw, n*oh*ow)`: for a
//! fixed kernel tap the inner dimension walks output pixels, so both the
//! unfold and the fold-back move whole rows with contiguous copies instead
//! of per-element index math. That is where the time goes otherwise; the
//! GEMMs are fine.

use ndarray::{Array1, Array2, Array4, NdFloat};
use rand::Rng;

use super::he_uniform;

#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    /// `(out_channels, in_channels, kh, kw)`
    pub w: Array4<F>,
    pub b: Array1<F>,
    pub padding: usize,
}

#[derive(Debug)]
pub struct Conv2dCache<F> {
    cols_t: Array2<F>,
    input_dim: (usize, usize, usize, usize),
}

#[derive(Debug)]
pub struct Conv2dGrads<F> {
    pub w: Array4<F>,
    pub b: Array1<F>,
}

impl<F: NdFloat> Conv2d<F> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let mut draw = he_uniform(fan_in, rng);
        let w = Array4::from_shape_simple_fn((out_channels, in_channels, kernel, kernel), || {
            draw()
        });
        Conv2d {
            w,
            b: Array1::zeros(out_channels),
            padding,
        }
    }

    /// Same-shape conv with all-zero weights (used for zero-initialized
    /// output heads).
    pub fn zeroed(in_channels: usize, out_channels: usize, kernel: usize, padding: usize) -> Self {
        Conv2d {
            w: Array4::zeros((out_channels, in_channels, kernel, kernel)),
            b: Array1::zeros(out_channels),
            padding,
        }
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.w.shape()[2], self.w.shape()[3])
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        let (kh, kw) = self.kernel();
        (h + 2 * self.padding - kh + 1, w + 2 * self.padding - kw + 1)
    }

    fn w_mat(&self) -> ndarray::ArrayView2<'_, F> {
        let oc = self.w.shape()[0];
        self.w
            .view()
            .into_shape_with_order((oc, self.w.len() / oc))
            .expect("weights contiguous")
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, Conv2dCache<F>) {
        let (n, _ic, h, w) = dim4(x);
        let (oc, _, kh, kw) = dim4(&self.w);
        let (oh, ow) = self.out_spatial(h, w);
        let cols_t = im2col_t(x, kh, kw, self.padding);
        // (oc, K) . (K, R) -> (oc, R)
        let mut out_t = self.w_mat().dot(&cols_t);
        for c in 0..oc {
            let bias = self.b[c];
            out_t.row_mut(c).mapv_inplace(|v| v + bias);
        }
        let out = out_t
            .into_shape_with_order((oc, n, oh, ow))
            .expect("row count matches")
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .to_owned();
        (
            out,
            Conv2dCache {
                cols_t,
                input_dim: (n, x.shape()[1], h, w),
            },
        )
    }

    /// Full backward pass: weight/bias gradients plus the input gradient.
    pub fn backward(
        &self,
        cache: &Conv2dCache<F>,
        d_out: &Array4<F>,
    ) -> (Conv2dGrads<F>, Array4<F>) {
        let (oc, ic, kh, kw) = dim4(&self.w);
        let g_t = grad_matrix_t(d_out, oc);
        let dw_mat = g_t.dot(&cache.cols_t.t());
        let dw = dw_mat
            .into_shape_with_order((oc, ic, kh, kw))
            .expect("gradient shape matches weights")
            .to_owned();
        let db = g_t.sum_axis(ndarray::Axis(1));
        let dx = self.input_grad_from(&g_t, cache.input_dim);
        (Conv2dGrads { w: dw, b: db }, dx)
    }

    /// Weight/bias gradients only, skipping the input gradient; for the
    /// first layer of a network, whose input gradient nobody consumes.
    pub fn backward_params(&self, cache: &Conv2dCache<F>, d_out: &Array4<F>) -> Conv2dGrads<F> {
        let (oc, ic, kh, kw) = dim4(&self.w);
        let g_t = grad_matrix_t(d_out, oc);
        let dw_mat = g_t.dot(&cache.cols_t.t());
        let dw = dw_mat
            .into_shape_with_order((oc, ic, kh, kw))
            .expect("gradient shape matches weights")
            .to_owned();
        let db = g_t.sum_axis(ndarray::Axis(1));
        Conv2dGrads { w: dw, b: db }
    }

    /// Input gradient only — the path used when this layer is frozen.
    pub fn backward_input(
        &self,
        d_out: &Array4<F>,
        input_dim: (usize, usize, usize, usize),
    ) -> Array4<F> {
        let oc = self.w.shape()[0];
        let g_t = grad_matrix_t(d_out, oc);
        self.input_grad_from(&g_t, input_dim)
    }

    fn input_grad_from(
        &self,
        g_t: &Array2<F>,
        input_dim: (usize, usize, usize, usize),
    ) -> Array4<F> {
        let (_, _, kh, kw) = dim4(&self.w);
        // (K, oc) . (oc, R) -> (K, R)
        let d_cols_t = self.w_mat().t().dot(g_t);
        col2im_t(&d_cols_t, input_dim, kh, kw, self.padding)
    }
}

fn dim4<F>(a: &Array4<F>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    (s[0], s[1], s[2], s[3])
}

/// `(n, oc, oh, ow)` gradient reordered as `(oc, n*oh*ow)`.
fn grad_matrix_t<F: NdFloat>(d_out: &Array4<F>, oc: usize) -> Array2<F> {
    let (n, _, oh, ow) = dim4(d_out);
    d_out
        .view()
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_shape_with_order((oc, n * oh * ow))
        .expect("contiguous after materializing")
        .to_owned()
}

/// Valid output-column range `[lo, hi)` for a kernel tap at offset
/// `k - padding` over an axis of source length `len` and output length
/// `out_len`.
fn tap_range(k: usize, padding: usize, len: usize, out_len: usize) -> (usize, usize) {
    let shift = k as isize - padding as isize;
    let lo = (-shift).max(0) as usize;
    let hi = ((len as isize - shift).min(out_len as isize)).max(0) as usize;
    (lo, hi.max(lo))
}

/// Unfold `(n, c, h, w)` into `(c*kh*kw, n*oh*ow)` (stride 1). Row `k` of
/// the result holds, for kernel tap `k = (ci, ky, kx)`, the shifted image
/// plane laid out output-pixel-major; border taps stay zero.
pub fn im2col_t<F: NdFloat>(x: &Array4<F>, kh: usize, kw: usize, padding: usize) -> Array2<F> {
    let (n, c, h, w) = dim4(x);
    let oh = h + 2 * padding - kh + 1;
    let ow = w + 2 * padding - kw + 1;
    let k = c * kh * kw;
    let r = n * oh * ow;
    let mut cols_t = Array2::zeros((k, r));
    let x_slice = x.as_slice().expect("input is standard layout");
    let cols_slice = cols_t.as_slice_mut().expect("freshly allocated");
    for ci in 0..c {
        for ky in 0..kh {
            let (oy_lo, oy_hi) = tap_range(ky, padding, h, oh);
            for kx in 0..kw {
                let (ox_lo, ox_hi) = tap_range(kx, padding, w, ow);
                if ox_hi <= ox_lo {
                    continue;
                }
                let row_base = ((ci * kh + ky) * kw + kx) * r;
                for i in 0..n {
                    let src_plane = (i * c + ci) * h * w;
                    let dst_plane = row_base + i * oh * ow;
                    for oy in oy_lo..oy_hi {
                        let sy = (oy + ky - padding) * w;
                        let sx = ox_lo + kx - padding;
                        let src = src_plane + sy + sx;
                        let dst = dst_plane + oy * ow + ox_lo;
                        let run = ox_hi - ox_lo;
                        cols_slice[dst..dst + run].copy_from_slice(&x_slice[src..src + run]);
                    }
                }
            }
        }
    }
    cols_t
}

/// Scatter-add the inverse of [`im2col_t`].
fn col2im_t<F: NdFloat>(
    d_cols_t: &Array2<F>,
    input_dim: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    padding: usize,
) -> Array4<F> {
    let (n, c, h, w) = input_dim;
    let oh = h + 2 * padding - kh + 1;
    let ow = w + 2 * padding - kw + 1;
    let r = n * oh * ow;
    let mut dx = Array4::zeros((n, c, h, w));
    let dx_slice = dx.as_slice_mut().expect("freshly allocated");
    let g = d_cols_t.as_slice().expect("gemm output is contiguous");
    for ci in 0..c {
        for ky in 0..kh {
            let (oy_lo, oy_hi) = tap_range(ky, padding, h, oh);
            for kx in 0..kw {
                let (ox_lo, ox_hi) = tap_range(kx, padding, w, ow);
                if ox_hi <= ox_lo {
                    continue;
                }
                let row_base = ((ci * kh + ky) * kw + kx) * r;
                for i in 0..n {
                    let dst_plane = (i * c + ci) * h * w;
                    let src_plane = row_base + i * oh * ow;
                    for oy in oy_lo..oy_hi {
                        let sy = (oy + ky - padding) * w;
                        let sx = ox_lo + kx - padding;
                        let dst = dst_plane + sy + sx;
                        let src = src_plane + oy * ow + ox_lo;
                        let run = ox_hi - ox_lo;
                        for j in 0..run {
                            dx_slice[dst + j] = dx_slice[dst + j] + g[src + j];
                        }
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random4(shape: (usize, usize, usize, usize), rng: &mut impl Rng) -> Array4<f64> {
        Array4::from_shape_simple_fn(shape, || rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &padding in &[0usize, 1, 2] {
            let conv = Conv2d::<f64>::new(2, 3, 3, padding, &mut rng);
            let x = random4((2, 2, 5, 6), &mut rng);
            let (y, _) = conv.forward(&x);
            let (oh, ow) = conv.out_spatial(5, 6);
            assert_eq!(y.shape(), &[2, 3, oh, ow]);
            // direct quadruple-loop reference
            for i in 0..2 {
                for oc in 0..3 {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = conv.b[oc];
                            for ic in 0..2 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let sy = oy as isize + ky as isize - padding as isize;
                                        let sx = ox as isize + kx as isize - padding as isize;
                                        if sy < 0 || sx < 0 || sy >= 5 || sx >= 6 {
                                            continue;
                                        }
                                        acc += conv.w[[oc, ic, ky, kx]]
                                            * x[[i, ic, sy as usize, sx as usize]];
                                    }
                                }
                            }
                            assert!(
                                (y[[i, oc, oy, ox]] - acc).abs() < 1e-12,
                                "padding {padding} at ({i},{oc},{oy},{ox})"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let conv = Conv2d::<f64>::new(2, 2, 3, 1, &mut rng);
        let x = random4((1, 2, 4, 4), &mut rng);
        let weights = random4((1, 2, 4, 4), &mut rng); // same spatial size with padding 1

        let loss = |c: &Conv2d<f64>, x: &Array4<f64>| -> f64 {
            let (y, _) = c.forward(x);
            (&y * &weights).sum()
        };

        let (y, cache) = conv.forward(&x);
        assert_eq!(y.shape(), weights.shape());
        let (grads, dx) = conv.backward(&cache, &weights);

        let h = 1e-6;
        // input gradient
        for idx in [[0, 0, 0, 0], [0, 1, 2, 3], [0, 0, 3, 1]] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[idx] += h;
            xm[idx] -= h;
            let numeric = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            assert!((dx[idx] - numeric).abs() < 1e-8, "dx at {idx:?}");
        }
        // weight gradient
        for idx in [[0, 0, 0, 0], [1, 1, 2, 2], [0, 1, 1, 0]] {
            let mut cp = conv.clone();
            let mut cm = conv.clone();
            cp.w[idx] += h;
            cm.w[idx] -= h;
            let numeric = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            assert!((grads.w[idx] - numeric).abs() < 1e-8, "dw at {idx:?}");
        }
        // bias gradient
        for c in 0..2 {
            let mut cp = conv.clone();
            let mut cm = conv.clone();
            cp.b[c] += h;
            cm.b[c] -= h;
            let numeric = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            assert!((grads.b[c] - numeric).abs() < 1e-8, "db at {c}");
        }
        // frozen path agrees with the full backward's input gradient
        let dx_only = conv.backward_input(&weights, (1, 2, 4, 4));
        assert_eq!(dx, dx_only);
    }

    #[test]
    fn unpadded_conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let conv = Conv2d::<f64>::new(1, 2, 3, 0, &mut rng);
        let x = random4((2, 1, 5, 5), &mut rng);
        let weights = random4((2, 2, 3, 3), &mut rng);
        let loss = |c: &Conv2d<f64>, x: &Array4<f64>| -> f64 {
            let (y, _) = c.forward(x);
            (&y * &weights).sum()
        };
        let (_, cache) = conv.forward(&x);
        let (grads, dx) = conv.backward(&cache, &weights);
        let h = 1e-6;
        for idx in [[0, 0, 0, 0], [1, 0, 4, 4], [0, 0, 2, 3]] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[idx] += h;
            xm[idx] -= h;
            let numeric = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            assert!((dx[idx] - numeric).abs() < 1e-8, "dx at {idx:?}");
        }
        for idx in [[0, 0, 0, 0], [1, 0, 2, 2]] {
            let mut cp = conv.clone();
            let mut cm = conv.clone();
            cp.w[idx] += h;
            cm.w[idx] -= h;
            let numeric = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            assert!((grads.w[idx] - numeric).abs() < 1e-8, "dw at {idx:?}");
        }
    }
}
