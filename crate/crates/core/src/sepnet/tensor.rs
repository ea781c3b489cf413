//! Channel-major 3-D tensors and the handful of ops the U-Net needs, each
//! with its exact backward pass.

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign};

use num_traits::Float;

/// Scalar type the network runs in. `f32` for training and inference,
/// `f64` for gradient checking.
pub trait Real: Float + AddAssign + MulAssign + Debug + Default + Send + Sync + 'static {
    fn of(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).expect("representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// `channels x height x width`, row-major within each channel. Height runs
/// over STFT frames and width over frequency bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn same_shape(&self, other: &Tensor<T>) -> bool {
        self.c == other.c && self.h == other.h && self.w == other.w
    }
}

pub(crate) fn leaky_forward<T: Real>(t: &mut Tensor<T>, slope: T) {
    for v in &mut t.data {
        if *v <= T::zero() {
            *v *= slope;
        }
    }
}

/// Backward through a leaky rectifier given its output. For positive slope
/// the output sign equals the input sign.
pub(crate) fn leaky_backward<T: Real>(grad: &mut Tensor<T>, output: &Tensor<T>, slope: T) {
    for (g, &o) in grad.data.iter_mut().zip(&output.data) {
        if o <= T::zero() {
            *g *= slope;
        }
    }
}

/// Output extent of a `k`-tap, stride-`s` convolution with `k/2` padding.
pub(crate) fn conv_out_len(n: usize, k: usize, s: usize) -> usize {
    let p = k / 2;
    (n + 2 * p - k) / s + 1
}

// Range of output positions whose tap `kk` lands inside the input.
#[inline]
fn valid_range(out_len: usize, in_len: usize, kk: usize, p: usize, s: usize) -> (usize, usize) {
    let lo = if kk < p { (p - kk).div_ceil(s) } else { 0 };
    // largest o with o*s + kk - p <= in_len - 1
    let top = in_len + p - 1;
    if top < kk {
        return (0, 0);
    }
    let hi = ((top - kk) / s + 1).min(out_len);
    (lo, hi.max(lo))
}

/// Square-kernel convolution. `weight` is `[out_c][in_c][k][k]`.
pub(crate) fn conv_forward<T: Real>(
    input: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    out_c: usize,
    k: usize,
    stride: usize,
) -> Tensor<T> {
    let p = k / 2;
    let (oh, ow) = (
        conv_out_len(input.h, k, stride),
        conv_out_len(input.w, k, stride),
    );
    let mut out = Tensor::zeros(out_c, oh, ow);
    let in_c = input.c;
    for oc in 0..out_c {
        let dst = out.channel_mut(oc);
        dst.iter_mut().for_each(|v| *v = bias[oc]);
        for ic in 0..in_c {
            let src = input.channel(ic);
            for ky in 0..k {
                let (ylo, yhi) = valid_range(oh, input.h, ky, p, stride);
                for kx in 0..k {
                    let wv = weight[((oc * in_c + ic) * k + ky) * k + kx];
                    let (xlo, xhi) = valid_range(ow, input.w, kx, p, stride);
                    if xlo >= xhi {
                        continue;
                    }
                    for oy in ylo..yhi {
                        let iy = oy * stride + ky - p;
                        let row_in = &src[iy * input.w..(iy + 1) * input.w];
                        let row_out = &mut dst[oy * ow + xlo..oy * ow + xhi];
                        if stride == 1 {
                            let ix0 = xlo + kx - p;
                            for (o, &i) in row_out.iter_mut().zip(&row_in[ix0..ix0 + (xhi - xlo)]) {
                                *o += wv * i;
                            }
                        } else {
                            for (n, o) in row_out.iter_mut().enumerate() {
                                *o += wv * row_in[(xlo + n) * stride + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients into `gw`/`gb` (f64) and returns the
/// input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Real>(
    input: &Tensor<T>,
    weight: &[T],
    grad_out: &Tensor<T>,
    k: usize,
    stride: usize,
    gw: &mut [f64],
    gb: &mut [f64],
    need_input_grad: bool,
) -> Option<Tensor<T>> {
    let p = k / 2;
    let (oh, ow) = (grad_out.h, grad_out.w);
    let in_c = input.c;
    let mut gin = need_input_grad.then(|| Tensor::zeros(in_c, input.h, input.w));
    for oc in 0..grad_out.c {
        let go = grad_out.channel(oc);
        gb[oc] += chunked_sum(go);
        for ic in 0..in_c {
            let src = input.channel(ic);
            for ky in 0..k {
                let (ylo, yhi) = valid_range(oh, input.h, ky, p, stride);
                for kx in 0..k {
                    let widx = ((oc * in_c + ic) * k + ky) * k + kx;
                    let wv = weight[widx];
                    let (xlo, xhi) = valid_range(ow, input.w, kx, p, stride);
                    if xlo >= xhi {
                        continue;
                    }
                    let mut acc = 0.0f64;
                    for oy in ylo..yhi {
                        let iy = oy * stride + ky - p;
                        let g_row = &go[oy * ow + xlo..oy * ow + xhi];
                        let mut row_acc = T::zero();
                        if stride == 1 {
                            let ix0 = xlo + kx - p;
                            let in_row = &src[iy * input.w + ix0..iy * input.w + ix0 + (xhi - xlo)];
                            for (&g, &i) in g_row.iter().zip(in_row) {
                                row_acc += g * i;
                            }
                            if let Some(gin) = gin.as_mut() {
                                let dst = &mut gin.channel_mut(ic)
                                    [iy * input.w + ix0..iy * input.w + ix0 + (xhi - xlo)];
                                for (d, &g) in dst.iter_mut().zip(g_row) {
                                    *d += wv * g;
                                }
                            }
                        } else {
                            let base = iy * input.w;
                            for (n, &g) in g_row.iter().enumerate() {
                                row_acc += g * src[base + (xlo + n) * stride + kx - p];
                            }
                            if let Some(gin) = gin.as_mut() {
                                let dst = gin.channel_mut(ic);
                                for (n, &g) in g_row.iter().enumerate() {
                                    dst[base + (xlo + n) * stride + kx - p] += wv * g;
                                }
                            }
                        }
                        acc += row_acc.f64();
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    gin
}

/// Sum with per-row partials promoted to f64.
pub(crate) fn chunked_sum<T: Real>(v: &[T]) -> f64 {
    v.chunks(256)
        .map(|c| c.iter().fold(T::zero(), |a, &b| a + b).f64())
        .sum()
}

pub(crate) fn chunked_dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.chunks(256)
        .zip(b.chunks(256))
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .fold(T::zero(), |acc, (&p, &q)| acc + p * q)
                .f64()
        })
        .sum()
}

/// Nearest-neighbour 2x upsampling cropped to `h x w`.
pub(crate) fn upsample2_forward<T: Real>(input: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(input.c, h, w);
    for c in 0..input.c {
        let src = input.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..h {
            let sy = y / 2;
            for x in 0..w {
                dst[y * w + x] = src[sy * input.w + x / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2_forward`]: each source pixel collects the
/// gradients of the children that survived the crop.
pub(crate) fn upsample2_backward<T: Real>(
    grad: &Tensor<T>,
    src_h: usize,
    src_w: usize,
) -> Tensor<T> {
    let mut out = Tensor::zeros(grad.c, src_h, src_w);
    for c in 0..grad.c {
        let g = grad.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..grad.h {
            for x in 0..grad.w {
                dst[(y / 2) * src_w + x / 2] += g[y * grad.w + x];
            }
        }
    }
    out
}

pub(crate) fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    debug_assert!(a.h == b.h && a.w == b.w);
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

pub(crate) fn split_channels<T: Real>(t: Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let cut = first * t.plane();
    let mut data = t.data;
    let rest = data.split_off(cut);
    (
        Tensor {
            c: first,
            h: t.h,
            w: t.w,
            data,
        },
        Tensor {
            c: t.c - first,
            h: t.h,
            w: t.w,
            data: rest,
        },
    )
}
