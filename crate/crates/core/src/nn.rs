//! Neural-net primitives: conv / transposed-conv / linear layers with
//! hand-derived backward passes.
//!
//! Layers are stateless shape descriptors; parameters and gradients live in
//! flat slices owned by the caller (see `model::Layout`). All math is generic
//! over [`Real`] so the same code runs in f32 for training and f64 for
//! gradient checks. The heavy lifting is im2col + GEMM through `ndarray`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{Array2, Array4, LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssign};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Floating-point scalar the network can run in.
pub trait Real:
    Float + NumAssign + LinalgScalar + ScalarOperand + Sum + Debug + Display + Send + Sync + 'static
{
    fn c(v: f64) -> Self;
    fn to64(self) -> f64;
}

impl Real for f32 {
    fn c(v: f64) -> Self {
        v as f32
    }
    fn to64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    fn c(v: f64) -> Self {
        v
    }
    fn to64(self) -> f64 {
        self
    }
}

/// Uniform init scaled by 1/sqrt(fan_in), the classic fan-in rule.
pub fn uniform_init<F: Real>(out: &mut [F], fan_in: usize, rng: &mut ChaCha8Rng) {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    for v in out.iter_mut() {
        *v = F::c(rng.random::<f64>() * 2.0 * bound - bound);
    }
}

// ---------------------------------------------------------------------------
// im2col / col2im
// ---------------------------------------------------------------------------

/// Gather sliding k x k windows of `x` (shape `[n, c, h, w]`) into a matrix of
/// shape `[c*k*k, n*ho*wo]`, zero-padded by `pad`, window stride `stride`.
#[allow(clippy::too_many_arguments)]
pub fn im2col<F: Real>(
    x: &Array4<F>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let l = ho * wo;
    let mut cols = Array2::<F>::zeros((c * k * k, n * l));
    let xs = x.as_slice().expect("standard layout");
    let cs = cols.as_slice_mut().expect("standard layout");
    let ncols = n * l;

    for ci in 0..c {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let row_base = row * ncols;
                // Valid output range for this kernel offset.
                let (oh_lo, oh_hi) = valid_range(kh, pad, stride, h, ho);
                let (ow_lo, ow_hi) = valid_range(kw, pad, stride, w, wo);
                for nb in 0..n {
                    let x_base = (nb * c + ci) * h * w;
                    let col_base = row_base + nb * l;
                    for oh in oh_lo..oh_hi {
                        let ih = oh * stride + kh - pad;
                        let src = x_base + ih * w + ow_lo * stride + kw - pad;
                        let dst = col_base + oh * wo + ow_lo;
                        for d in 0..ow_hi - ow_lo {
                            cs[dst + d] = xs[src + d * stride];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add adjoint of [`im2col`]: accumulate `cols` back into an image of
/// shape `[n, c, h, w]`.
#[allow(clippy::too_many_arguments)]
pub fn col2im<F: Real>(
    cols: &Array2<F>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array4<F> {
    let l = ho * wo;
    debug_assert_eq!(cols.dim(), (c * k * k, n * l));
    let mut x = Array4::<F>::zeros((n, c, h, w));
    let xs = x.as_slice_mut().expect("standard layout");
    let cs = cols.as_slice().expect("standard layout");
    let ncols = n * l;

    for ci in 0..c {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let row_base = row * ncols;
                let (oh_lo, oh_hi) = valid_range(kh, pad, stride, h, ho);
                let (ow_lo, ow_hi) = valid_range(kw, pad, stride, w, wo);
                for nb in 0..n {
                    let x_base = (nb * c + ci) * h * w;
                    let col_base = row_base + nb * l;
                    for oh in oh_lo..oh_hi {
                        let ih = oh * stride + kh - pad;
                        let dst = x_base + ih * w + ow_lo * stride + kw - pad;
                        let src = col_base + oh * wo + ow_lo;
                        for d in 0..ow_hi - ow_lo {
                            xs[dst + d * stride] += cs[src + d];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Output positions `o` with `0 <= o*stride + koff - pad < extent`, clipped to
/// `[0, out_extent)`.
fn valid_range(
    koff: usize,
    pad: usize,
    stride: usize,
    extent: usize,
    out_extent: usize,
) -> (usize, usize) {
    let lo = if koff >= pad {
        0
    } else {
        (pad - koff).div_ceil(stride)
    };
    // o*stride + koff - pad <= extent-1  =>  o <= (extent-1+pad-koff)/stride
    let hi = if extent + pad > koff {
        ((extent - 1 + pad - koff) / stride + 1).min(out_extent)
    } else {
        0
    };
    (lo.min(hi), hi)
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// Strided convolution. Weights `[c_out, c_in, k, k]`, bias `[c_out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k
    }

    pub fn fan_in(&self) -> usize {
        self.c_in * self.k * self.k
    }

    /// Returns the output and the im2col matrix needed by `backward`.
    pub fn forward<F: Real>(&self, x: &Array4<F>, w: &[F], b: &[F]) -> (Array4<F>, Array2<F>) {
        let (n, c_in, h, wd) = x.dim();
        debug_assert_eq!(c_in, self.c_in);
        let (ho, wo) = self.out_hw(h, wd);
        let cols = im2col(x, self.k, self.stride, self.pad, ho, wo);
        let w_mat = mat_view(w, self.c_out, self.c_in * self.k * self.k);
        let mut y_mat = w_mat.dot(&cols); // [c_out, n*l]
        for (ci, mut row) in y_mat.rows_mut().into_iter().enumerate() {
            let bias = b[ci];
            row.mapv_inplace(|v| v + bias);
        }
        (mat_to_images(&y_mat, n, self.c_out, ho, wo), cols)
    }

    /// Accumulates into `dw`/`db`, returns the input gradient.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<F: Real>(
        &self,
        cols: &Array2<F>,
        dy: &Array4<F>,
        w: &[F],
        dw: &mut [F],
        db: &mut [F],
        in_hw: (usize, usize),
    ) -> Array4<F> {
        let (n, c_out, ho, wo) = dy.dim();
        debug_assert_eq!(c_out, self.c_out);
        let dy_mat = images_to_mat(dy); // [c_out, n*l]

        let dw_update = dy_mat.dot(&cols.t()); // [c_out, c_in*k*k]
        accumulate(dw, &dw_update);
        for (ci, row) in dy_mat.rows().into_iter().enumerate() {
            db[ci] += row.iter().copied().sum::<F>();
        }

        let w_mat = mat_view(w, self.c_out, self.c_in * self.k * self.k);
        let dcols = w_mat.t().dot(&dy_mat); // [c_in*k*k, n*l]
        col2im(
            &dcols, n, self.c_in, in_hw.0, in_hw.1, self.k, self.stride, self.pad, ho, wo,
        )
    }
}

/// Strided transposed convolution (the adjoint map of [`Conv2d`]).
/// Weights `[c_in, c_out, k, k]`, bias `[c_out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTranspose2d {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvTranspose2d {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h - 1) * self.stride + self.k + self.out_pad - 2 * self.pad,
            (w - 1) * self.stride + self.k + self.out_pad - 2 * self.pad,
        )
    }

    pub fn weight_len(&self) -> usize {
        self.c_in * self.c_out * self.k * self.k
    }

    pub fn fan_in(&self) -> usize {
        self.c_out * self.k * self.k
    }

    /// Returns the output and the `[c_in, n*l]` input matrix for `backward`.
    pub fn forward<F: Real>(&self, x: &Array4<F>, w: &[F], b: &[F]) -> (Array4<F>, Array2<F>) {
        let (n, c_in, h, wd) = x.dim();
        debug_assert_eq!(c_in, self.c_in);
        let (ho, wo) = self.out_hw(h, wd);
        let x_mat = images_to_mat(x); // [c_in, n*l_small]
        let w_mat = mat_view(w, self.c_in, self.c_out * self.k * self.k);
        let cols = w_mat.t().dot(&x_mat); // [c_out*k*k, n*l_small]
        let mut y = col2im(&cols, n, self.c_out, ho, wo, self.k, self.stride, self.pad, h, wd);
        add_channel_bias(&mut y, b);
        (y, x_mat)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward<F: Real>(
        &self,
        x_mat: &Array2<F>,
        dy: &Array4<F>,
        w: &[F],
        dw: &mut [F],
        db: &mut [F],
        in_hw: (usize, usize),
    ) -> Array4<F> {
        let (n, c_out, _ho, _wo) = dy.dim();
        debug_assert_eq!(c_out, self.c_out);
        // Input positions play the role of conv output positions here.
        let dcols = im2col(dy, self.k, self.stride, self.pad, in_hw.0, in_hw.1);

        let dw_update = x_mat.dot(&dcols.t()); // [c_in, c_out*k*k]
        accumulate(dw, &dw_update);
        let dy_mat = images_to_mat(dy);
        for (ci, row) in dy_mat.rows().into_iter().enumerate() {
            db[ci] += row.iter().copied().sum::<F>();
        }

        let w_mat = mat_view(w, self.c_in, self.c_out * self.k * self.k);
        let dx_mat = w_mat.dot(&dcols); // [c_in, n*l_small]
        mat_to_images(&dx_mat, n, self.c_in, in_hw.0, in_hw.1)
    }
}

/// Fully connected layer. Weights `[d_out, d_in]`, bias `[d_out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn weight_len(&self) -> usize {
        self.d_out * self.d_in
    }

    pub fn forward<F: Real>(&self, x: &Array2<F>, w: &[F], b: &[F]) -> Array2<F> {
        let w_mat = mat_view(w, self.d_out, self.d_in);
        let mut y = x.dot(&w_mat.t()); // [n, d_out]
        for mut row in y.rows_mut() {
            for (v, bias) in row.iter_mut().zip(b) {
                *v += *bias;
            }
        }
        y
    }

    pub fn backward<F: Real>(
        &self,
        x: &Array2<F>,
        dy: &Array2<F>,
        w: &[F],
        dw: &mut [F],
        db: &mut [F],
    ) -> Array2<F> {
        let dw_update = dy.t().dot(x); // [d_out, d_in]
        accumulate(dw, &dw_update);
        for row in dy.rows() {
            for (acc, v) in db.iter_mut().zip(row) {
                *acc += *v;
            }
        }
        let w_mat = mat_view(w, self.d_out, self.d_in);
        dy.dot(&w_mat)
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

pub fn relu_inplace<F: Real>(x: &mut [F]) {
    for v in x.iter_mut() {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
}

/// Backward through ReLU given the *activated* values (mask is `act > 0`).
pub fn relu_backward_inplace<F: Real>(grad: &mut [F], act: &[F]) {
    for (g, a) in grad.iter_mut().zip(act) {
        if *a <= F::zero() {
            *g = F::zero();
        }
    }
}

pub fn sigmoid<F: Real>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

// ---------------------------------------------------------------------------
// Small helpers
// ---------------------------------------------------------------------------

fn mat_view<F: Real>(data: &[F], rows: usize, cols: usize) -> ndarray::ArrayView2<'_, F> {
    ndarray::ArrayView2::from_shape((rows, cols), data).expect("parameter slice length")
}

fn accumulate<F: Real>(acc: &mut [F], update: &Array2<F>) {
    let u = update.as_slice().expect("standard layout");
    debug_assert_eq!(acc.len(), u.len());
    for (a, b) in acc.iter_mut().zip(u) {
        *a += *b;
    }
}

/// `[c, n*l]` matrix -> `[n, c, ho, wo]` images. Rows are per-channel, columns
/// ordered `(n, oh, ow)`, so each `(c, n)` pair is one contiguous copy.
fn mat_to_images<F: Real>(m: &Array2<F>, n: usize, c: usize, ho: usize, wo: usize) -> Array4<F> {
    let l = ho * wo;
    let ms = m.as_slice().expect("standard layout");
    let mut out = Array4::<F>::zeros((n, c, ho, wo));
    let os = out.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        for nb in 0..n {
            let src = ci * (n * l) + nb * l;
            let dst = (nb * c + ci) * l;
            os[dst..dst + l].copy_from_slice(&ms[src..src + l]);
        }
    }
    out
}

/// `[n, c, h, w]` images -> `[c, n*l]` matrix (inverse layout of
/// [`mat_to_images`]).
fn images_to_mat<F: Real>(x: &Array4<F>) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let l = h * w;
    let xs = x.as_slice().expect("standard layout");
    let mut out = Array2::<F>::zeros((c, n * l));
    let os = out.as_slice_mut().expect("standard layout");
    for nb in 0..n {
        for ci in 0..c {
            let src = (nb * c + ci) * l;
            let dst = ci * (n * l) + nb * l;
            os[dst..dst + l].copy_from_slice(&xs[src..src + l]);
        }
    }
    out
}

fn add_channel_bias<F: Real>(y: &mut Array4<F>, b: &[F]) {
    let (n, c, h, w) = y.dim();
    let l = h * w;
    let ys = y.as_slice_mut().expect("standard layout");
    for nb in 0..n {
        for ci in 0..c {
            let base = (nb * c + ci) * l;
            let bias = b[ci];
            for v in &mut ys[base..base + l] {
                *v += bias;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use ndarray::Array4;

    fn random_image(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Array4<f64> {
        let mut rng = seeds::stream(seed, "nn-test", 0);
        Array4::from_shape_fn((n, c, h, w), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    fn random_params(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = seeds::stream(seed, "nn-test-p", 0);
        (0..len).map(|_| rng.random::<f64>() - 0.5).collect()
    }

    /// Reference convolution: direct six-loop sum, no im2col.
    fn conv_reference(x: &Array4<f64>, w: &[f64], b: &[f64], conv: &Conv2d) -> Array4<f64> {
        let (n, _, h, wd) = x.dim();
        let (ho, wo) = conv.out_hw(h, wd);
        let mut y = Array4::<f64>::zeros((n, conv.c_out, ho, wo));
        for nb in 0..n {
            for co in 0..conv.c_out {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = b[co];
                        for ci in 0..conv.c_in {
                            for kh in 0..conv.k {
                                for kw in 0..conv.k {
                                    let ih = (oh * conv.stride + kh) as isize - conv.pad as isize;
                                    let iw = (ow * conv.stride + kw) as isize - conv.pad as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                        continue;
                                    }
                                    let widx =
                                        ((co * conv.c_in + ci) * conv.k + kh) * conv.k + kw;
                                    acc += x[(nb, ci, ih as usize, iw as usize)] * w[widx];
                                }
                            }
                        }
                        y[(nb, co, oh, ow)] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_forward_matches_direct_sum() {
        let conv = Conv2d {
            c_in: 2,
            c_out: 3,
            k: 3,
            stride: 2,
            pad: 1,
        };
        let x = random_image(2, 2, 6, 6, 1);
        let w = random_params(conv.weight_len(), 2);
        let b = random_params(conv.c_out, 3);
        let (y, _) = conv.forward(&x, &w, &b);
        let y_ref = conv_reference(&x, &w, &b, &conv);
        assert_eq!(y.dim(), y_ref.dim());
        for (a, r) in y.iter().zip(y_ref.iter()) {
            assert!((a - r).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_transpose(y)> when they share weights.
        let conv = Conv2d {
            c_in: 2,
            c_out: 3,
            k: 3,
            stride: 2,
            pad: 1,
        };
        let deconv = ConvTranspose2d {
            c_in: 3,
            c_out: 2,
            k: 3,
            stride: 2,
            pad: 1,
            out_pad: 1,
        };
        let x = random_image(1, 2, 6, 6, 4);
        let (ho, wo) = conv.out_hw(6, 6);
        let y = random_image(1, 3, ho, wo, 5);
        let w = random_params(conv.weight_len(), 6);
        let zero_b3 = vec![0.0; 3];
        let zero_b2 = vec![0.0; 2];

        let (cx, _) = conv.forward(&x, &w, &zero_b3);
        // Conv weights [c_out, c_in, k, k] and the adjoint's transposed-conv
        // weights [c_in_t = c_out, c_out_t = c_in, k, k] share one flat
        // layout, so the same buffer serves both.
        let (ty, _) = deconv.forward(&y, &w, &zero_b2);
        assert_eq!(ty.dim(), x.dim());

        let lhs: f64 = cx.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(ty.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let conv = Conv2d {
            c_in: 1,
            c_out: 2,
            k: 3,
            stride: 2,
            pad: 1,
        };
        let x = random_image(2, 1, 4, 4, 7);
        let mut w = random_params(conv.weight_len(), 8);
        let b = random_params(conv.c_out, 9);
        // Scalar objective: sum of squares of the output.
        let loss = |x: &Array4<f64>, w: &[f64]| -> f64 {
            let (y, _) = conv.forward(x, w, &b);
            y.iter().map(|v| v * v).sum::<f64>() * 0.5
        };

        let (y, cols) = conv.forward(&x, &w, &b);
        let dy = y.clone();
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; b.len()];
        let dx = conv.backward(&cols, &dy, &w, &mut dw, &mut db, (4, 4));

        let h = 1e-6;
        for i in 0..w.len() {
            let orig = w[i];
            w[i] = orig + h;
            let up = loss(&x, &w);
            w[i] = orig - h;
            let dn = loss(&x, &w);
            w[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - dw[i]).abs() < 1e-6, "dw[{i}]: fd {fd} vs {}", dw[i]);
        }
        let mut xp = x.clone();
        for i in 0..xp.len() {
            let flat = xp.as_slice_mut().unwrap();
            let orig = flat[i];
            flat[i] = orig + h;
            let up = loss(&xp, &w);
            let flat = xp.as_slice_mut().unwrap();
            flat[i] = orig - h;
            let dn = loss(&xp, &w);
            let flat = xp.as_slice_mut().unwrap();
            flat[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            let an = dx.as_slice().unwrap()[i];
            assert!((fd - an).abs() < 1e-6, "dx[{i}]: fd {fd} vs {an}");
        }
    }

    #[test]
    fn conv_transpose_backward_matches_finite_differences() {
        // Multiple output channels on purpose: a single-channel bias cannot
        // catch channel-indexing mistakes in the bias gradient.
        let deconv = ConvTranspose2d {
            c_in: 3,
            c_out: 2,
            k: 3,
            stride: 2,
            pad: 1,
            out_pad: 1,
        };
        let x = random_image(2, 3, 2, 2, 11);
        let mut w = random_params(deconv.weight_len(), 12);
        let mut b = random_params(deconv.c_out, 13);
        let loss = |x: &Array4<f64>, w: &[f64], b: &[f64]| -> f64 {
            let (y, _) = deconv.forward(x, w, b);
            y.iter().map(|v| v * v).sum::<f64>() * 0.5
        };

        let (y, x_mat) = deconv.forward(&x, &w, &b);
        assert_eq!(y.dim(), (2, 2, 4, 4));
        let dy = y.clone();
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; b.len()];
        let dx = deconv.backward(&x_mat, &dy, &w, &mut dw, &mut db, (2, 2));

        let h = 1e-6;
        for i in 0..w.len() {
            let orig = w[i];
            w[i] = orig + h;
            let up = loss(&x, &w, &b);
            w[i] = orig - h;
            let dn = loss(&x, &w, &b);
            w[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - dw[i]).abs() < 1e-6, "dw[{i}]: fd {fd} vs {}", dw[i]);
        }
        for i in 0..b.len() {
            let orig = b[i];
            b[i] = orig + h;
            let up = loss(&x, &w, &b);
            b[i] = orig - h;
            let dn = loss(&x, &w, &b);
            b[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - db[i]).abs() < 1e-6, "db[{i}]: fd {fd} vs {}", db[i]);
        }
        let mut xp = x.clone();
        for i in 0..xp.len() {
            let flat = xp.as_slice_mut().unwrap();
            let orig = flat[i];
            flat[i] = orig + h;
            let up = loss(&xp, &w, &b);
            let flat = xp.as_slice_mut().unwrap();
            flat[i] = orig - h;
            let dn = loss(&xp, &w, &b);
            let flat = xp.as_slice_mut().unwrap();
            flat[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            let an = dx.as_slice().unwrap()[i];
            assert!((fd - an).abs() < 1e-6, "dx[{i}]: fd {fd} vs {an}");
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let lin = Linear { d_in: 4, d_out: 3 };
        let x = Array2::from_shape_fn((2, 4), |(i, j)| (i as f64 + 1.0) * 0.3 - j as f64 * 0.2);
        let mut w = random_params(lin.weight_len(), 20);
        let b = random_params(lin.d_out, 21);
        let loss = |x: &Array2<f64>, w: &[f64]| -> f64 {
            let y = lin.forward(x, w, &b);
            y.iter().map(|v| v * v).sum::<f64>() * 0.5
        };
        let y = lin.forward(&x, &w, &b);
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; b.len()];
        let dx = lin.backward(&x, &y, &w, &mut dw, &mut db);
        let h = 1e-6;
        for i in 0..w.len() {
            let orig = w[i];
            w[i] = orig + h;
            let up = loss(&x, &w);
            w[i] = orig - h;
            let dn = loss(&x, &w);
            w[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - dw[i]).abs() < 1e-7);
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            let flat = xp.as_slice_mut().unwrap();
            flat[i] += h;
            let up = loss(&xp, &w);
            let flat = xp.as_slice_mut().unwrap();
            flat[i] -= 2.0 * h;
            let dn = loss(&xp, &w);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - dx.as_slice().unwrap()[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for random tensors.
        let x = random_image(2, 3, 5, 5, 30);
        let (k, stride, pad) = (3, 2, 1);
        let ho = (5 + 2 * pad - k) / stride + 1;
        let cols = im2col(&x, k, stride, pad, ho, ho);
        let mut rng = seeds::stream(31, "nn-test", 0);
        let c = Array2::from_shape_fn(cols.dim(), |_| rng.random::<f64>() - 0.5);
        let lhs: f64 = cols.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
        let back = col2im(&c, 2, 3, 5, 5, k, stride, pad, ho, ho);
        let rhs: f64 = x.iter().zip(back.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn relu_roundtrip() {
        let mut v = vec![-1.0f32, 0.0, 2.0];
        relu_inplace(&mut v);
        assert_eq!(v, vec![0.0, 0.0, 2.0]);
        let mut g = vec![1.0f32, 1.0, 1.0];
        relu_backward_inplace(&mut g, &v);
        assert_eq!(g, vec![0.0, 0.0, 1.0]);
    }
}
