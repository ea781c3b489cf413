//! The separation network.
//!
//! A small U-Net turns the (log-compressed) mixture magnitude into `k`
//! intermediate masks. A query embedding is projected to a `k`-vector of
//! channel weights `q`, and the final mask for that query is
//!
//! ```text
//! M_hat = sigmoid( sum_j w_j * q_j * M_tilde_j + b )
//! ```
//!
//! with a single sigmoid applied after the channel sum so that the mask lies
//! in (0, 1). The U-Net runs once per mixture; every query reuses its output.

mod checkpoint;
pub mod tensor;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use tensor::{
    chunked_dot, chunked_sum, concat_channels, conv_backward, conv_forward, conv_out_len,
    leaky_backward, leaky_forward, split_channels, upsample2_backward, upsample2_forward, Tensor,
};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use tensor::Real;

/// Pre-activations are clamped to this magnitude before the sigmoid.
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SepNetHyper {
    /// Number of U-Net levels (encoder convolutions).
    pub depth: usize,
    /// Number of intermediate masks.
    pub k: usize,
    /// Query embedding dimension.
    pub embed_dim: usize,
    /// Channels at level 0; doubled per level up to `max_channels`.
    pub base_channels: usize,
    pub max_channels: usize,
    pub leaky_slope: f64,
}

impl Default for SepNetHyper {
    fn default() -> Self {
        Self {
            depth: 5,
            k: 8,
            embed_dim: 64,
            base_channels: 8,
            max_channels: 16,
            leaky_slope: 0.2,
        }
    }
}

impl SepNetHyper {
    /// Seven levels, 32 intermediate masks, 1024-dimensional queries.
    pub fn full_scale() -> Self {
        Self {
            depth: 7,
            k: 32,
            embed_dim: 1024,
            base_channels: 32,
            max_channels: 256,
            leaky_slope: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 12 {
            return Err(Error::invalid(format!(
                "depth {} outside 1..=12",
                self.depth
            )));
        }
        if self.k == 0 || self.embed_dim == 0 || self.base_channels == 0 {
            return Err(Error::invalid(
                "k, embed_dim and base_channels must be positive",
            ));
        }
        if self.max_channels < self.base_channels {
            return Err(Error::invalid("max_channels must be >= base_channels"));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::invalid("leaky_slope must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn channels(&self) -> Vec<usize> {
        (0..self.depth)
            .map(|l| {
                self.base_channels
                    .saturating_mul(1usize.checked_shl(l as u32).unwrap_or(usize::MAX))
                    .min(self.max_channels)
            })
            .collect()
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let c = self.channels();
        let mut n = 9 * c[0] + c[0];
        for l in 1..self.depth {
            n += 9 * c[l - 1] * c[l] + c[l];
        }
        for l in 0..self.depth.saturating_sub(1) {
            n += 9 * (c[l + 1] + c[l]) * c[l] + c[l];
        }
        n += c[0] * self.k + self.k;
        n += self.embed_dim * self.k + self.k;
        n + self.k + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvSlot {
    weight: usize,
    bias: usize,
    in_c: usize,
    out_c: usize,
    k: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    tensors: Vec<TensorInfo>,
    enc: Vec<ConvSlot>,
    // dec[l] produces level-l features from level l+1 and the level-l skip.
    dec: Vec<ConvSlot>,
    out: ConvSlot,
    proj_weight: usize,
    proj_bias: usize,
    combine_scale: usize,
    combine_bias: usize,
    total: usize,
}

impl Layout {
    fn new(h: &SepNetHyper) -> Self {
        let mut tensors = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| -> usize {
            let offset = tensors.last().map_or(0, |t: &TensorInfo| t.offset + t.len);
            let len = shape.iter().product();
            tensors.push(TensorInfo {
                name,
                shape,
                offset,
                len,
            });
            tensors.len() - 1
        };
        let c = h.channels();
        let mut conv = |name: &str, in_c: usize, out_c: usize, k: usize| ConvSlot {
            weight: push(format!("{name}.weight"), vec![out_c, in_c, k, k]),
            bias: push(format!("{name}.bias"), vec![out_c]),
            in_c,
            out_c,
            k,
        };
        let mut enc = Vec::new();
        for l in 0..h.depth {
            let in_c = if l == 0 { 1 } else { c[l - 1] };
            enc.push(conv(&format!("enc{l}"), in_c, c[l], 3));
        }
        let mut dec: Vec<Option<ConvSlot>> = vec![None; h.depth.saturating_sub(1)];
        for l in (0..h.depth.saturating_sub(1)).rev() {
            dec[l] = Some(conv(&format!("dec{l}"), c[l + 1] + c[l], c[l], 3));
        }
        let out = conv("masks", c[0], h.k, 1);
        let proj_weight = push("query_proj.weight".into(), vec![h.k, h.embed_dim]);
        let proj_bias = push("query_proj.bias".into(), vec![h.k]);
        let combine_scale = push("combine.scale".into(), vec![h.k]);
        let combine_bias = push("combine.bias".into(), vec![1]);
        let total = tensors.last().map_or(0, |t| t.offset + t.len);
        Self {
            tensors,
            enc,
            dec: dec.into_iter().map(|d| d.expect("filled")).collect(),
            out,
            proj_weight,
            proj_bias,
            combine_scale,
            combine_bias,
            total,
        }
    }

    fn range(&self, id: usize) -> std::ops::Range<usize> {
        let t = &self.tensors[id];
        t.offset..t.offset + t.len
    }
}

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// All learnable parameters, stored flat in declaration order.
#[derive(Debug)]
pub struct SeparationModel<T> {
    hyper: SepNetHyper,
    layout: Layout,
    params: Vec<T>,
    // Changes on every mutation so a trace can detect that it is stale.
    stamp: u64,
}

impl<T: Real> Clone for SeparationModel<T> {
    fn clone(&self) -> Self {
        Self {
            hyper: self.hyper.clone(),
            layout: self.layout.clone(),
            params: self.params.clone(),
            stamp: fresh_stamp(),
        }
    }
}

impl<T: Real> PartialEq for SeparationModel<T> {
    fn eq(&self, other: &Self) -> bool {
        self.hyper == other.hyper && self.params == other.params
    }
}

/// Parameter gradients, always accumulated in f64, with the same layout as
/// the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub values: Vec<f64>,
}

impl Gradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            values: vec![0.0; n],
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|g| *g *= s);
    }
}

/// Per-query head activations.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTrace<T> {
    pub query: Vec<T>,
    /// Channel weights `q = W Q + c`.
    pub channel_weights: Vec<T>,
    /// Final mask, `frames x bins`.
    pub mask: Vec<T>,
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    stamp: u64,
    input: Tensor<T>,
    enc_out: Vec<Tensor<T>>,
    dec_in: Vec<Tensor<T>>,
    dec_out: Vec<Tensor<T>>,
    /// The `k` intermediate masks.
    pub intermediate: Tensor<T>,
    pub heads: Vec<HeadTrace<T>>,
}

impl<T: Real> ForwardTrace<T> {
    pub fn frames(&self) -> usize {
        self.input.h
    }

    pub fn bins(&self) -> usize {
        self.input.w
    }
}

/// Backward-pass results: parameter gradients and the gradient of the loss
/// with respect to each head's query embedding.
#[derive(Debug, Clone)]
pub struct Backward {
    pub grads: Gradients,
    pub query_grads: Vec<Vec<f64>>,
}

fn sigmoid(z: f64) -> f64 {
    let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    1.0 / (1.0 + (-z).exp())
}

impl<T: Real> SeparationModel<T> {
    /// Kaiming-uniform convolutions, fan-in uniform projection, zero biases,
    /// unit combination scale.
    pub fn init(hyper: SepNetHyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let layout = Layout::new(&hyper);
        debug_assert_eq!(layout.total, hyper.param_count());
        let mut params = vec![T::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slope = hyper.leaky_slope;
        let gain = (2.0 / (1.0 + slope * slope)).sqrt();
        let mut fill = |params: &mut [T], bound: f64| {
            for p in params.iter_mut() {
                *p = T::of(rng.gen_range(-bound..=bound));
            }
        };
        let convs: Vec<ConvSlot> = layout
            .enc
            .iter()
            .chain(&layout.dec)
            .copied()
            .chain(std::iter::once(layout.out))
            .collect();
        for slot in convs {
            let fan_in = (slot.in_c * slot.k * slot.k) as f64;
            let bound = if slot == layout.out {
                (3.0 / fan_in).sqrt()
            } else {
                gain * (3.0 / fan_in).sqrt()
            };
            fill(&mut params[layout.range(slot.weight)], bound);
        }
        fill(
            &mut params[layout.range(layout.proj_weight)],
            (3.0 / hyper.embed_dim as f64).sqrt(),
        );
        for p in &mut params[layout.range(layout.combine_scale)] {
            *p = T::one();
        }
        Ok(Self {
            hyper,
            layout,
            params,
            stamp: fresh_stamp(),
        })
    }

    pub fn hyper(&self) -> &SepNetHyper {
        &self.hyper
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    /// Mutable access to the flat parameter vector; invalidates traces.
    pub fn params_mut(&mut self) -> &mut [T] {
        self.stamp = fresh_stamp();
        &mut self.params
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.layout.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout
            .tensors
            .iter()
            .position(|t| t.name == name)
            .map(|i| &self.params[self.layout.range(i)])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let i = self.layout.tensors.iter().position(|t| t.name == name)?;
        let r = self.layout.range(i);
        Some(&mut self.params_mut()[r])
    }

    fn slice(&self, id: usize) -> &[T] {
        &self.params[self.layout.range(id)]
    }

    /// Same parameters in another scalar type.
    pub fn cast<U: Real>(&self) -> SeparationModel<U> {
        SeparationModel {
            hyper: self.hyper.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|p| U::of(p.f64())).collect(),
            stamp: fresh_stamp(),
        }
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients::zeros(self.params.len())
    }

    fn check_input(&self, magnitude: &[f64], frames: usize, bins: usize) -> Result<()> {
        if frames == 0 || bins == 0 || magnitude.len() != frames * bins {
            return Err(Error::GeometryMismatch(format!(
                "{} magnitude values for {frames}x{bins}",
                magnitude.len()
            )));
        }
        if magnitude.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::NonFinite("magnitude input"));
        }
        Ok(())
    }

    /// Runs the U-Net once and one head per query. `magnitude` is the raw
    /// mixture magnitude X, frame-major.
    pub fn forward(
        &self,
        magnitude: &[f64],
        frames: usize,
        bins: usize,
        queries: &[&[f64]],
    ) -> Result<ForwardTrace<T>> {
        self.check_input(magnitude, frames, bins)?;
        for q in queries {
            if q.len() != self.hyper.embed_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.hyper.embed_dim,
                    actual: q.len(),
                });
            }
            if q.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("query embedding"));
            }
        }
        let slope = T::of(self.hyper.leaky_slope);
        let input = Tensor {
            c: 1,
            h: frames,
            w: bins,
            data: magnitude.iter().map(|&x| T::of(x.ln_1p())).collect(),
        };

        let mut enc_out: Vec<Tensor<T>> = Vec::with_capacity(self.hyper.depth);
        for (l, slot) in self.layout.enc.iter().enumerate() {
            let src = if l == 0 { &input } else { &enc_out[l - 1] };
            let stride = if l == 0 { 1 } else { 2 };
            let mut t = conv_forward(
                src,
                self.slice(slot.weight),
                self.slice(slot.bias),
                slot.out_c,
                3,
                stride,
            );
            leaky_forward(&mut t, slope);
            enc_out.push(t);
        }

        let levels = self.layout.dec.len();
        let mut dec_in: Vec<Option<Tensor<T>>> = vec![None; levels];
        let mut dec_out: Vec<Option<Tensor<T>>> = vec![None; levels];
        for l in (0..levels).rev() {
            let below = if l + 1 == levels {
                &enc_out[l + 1]
            } else {
                dec_out[l + 1].as_ref().expect("computed")
            };
            let skip = &enc_out[l];
            let up = upsample2_forward(below, skip.h, skip.w);
            let cat = concat_channels(&up, skip);
            let slot = self.layout.dec[l];
            let mut t = conv_forward(
                &cat,
                self.slice(slot.weight),
                self.slice(slot.bias),
                slot.out_c,
                3,
                1,
            );
            leaky_forward(&mut t, slope);
            dec_in[l] = Some(cat);
            dec_out[l] = Some(t);
        }
        let top = if levels > 0 {
            dec_out[0].as_ref().expect("computed")
        } else {
            &enc_out[0]
        };
        let out = self.layout.out;
        let intermediate = conv_forward(
            top,
            self.slice(out.weight),
            self.slice(out.bias),
            out.out_c,
            1,
            1,
        );

        let heads = queries
            .iter()
            .map(|q| self.head_forward(&intermediate, q))
            .collect();

        Ok(ForwardTrace {
            stamp: self.stamp,
            input,
            enc_out,
            dec_in: dec_in.into_iter().map(|t| t.expect("computed")).collect(),
            dec_out: dec_out.into_iter().map(|t| t.expect("computed")).collect(),
            intermediate,
            heads,
        })
    }

    /// Channel weights `q` for a query.
    pub fn project_query(&self, query: &[f64]) -> Vec<f64> {
        let d = self.hyper.embed_dim;
        let w = self.slice(self.layout.proj_weight);
        let b = self.slice(self.layout.proj_bias);
        let qt: Vec<T> = query.iter().map(|&v| T::of(v)).collect();
        (0..self.hyper.k)
            .map(|j| b[j].f64() + chunked_dot(&w[j * d..(j + 1) * d], &qt))
            .collect()
    }

    fn head_forward(&self, intermediate: &Tensor<T>, query: &[f64]) -> HeadTrace<T> {
        let q: Vec<T> = self.project_query(query).into_iter().map(T::of).collect();
        let scale = self.slice(self.layout.combine_scale);
        let bias = self.slice(self.layout.combine_bias)[0];
        let plane = intermediate.plane();
        let mut z = vec![bias; plane];
        for j in 0..self.hyper.k {
            let coef = scale[j] * q[j];
            for (zi, &m) in z.iter_mut().zip(intermediate.channel(j)) {
                *zi += coef * m;
            }
        }
        // Saturated sigmoids round to exactly 0 or 1 in f32; keep the mask open.
        let hi = T::one() - T::epsilon() / T::of(2.0);
        let mask = z
            .into_iter()
            .map(|v| T::of(sigmoid(v.f64())).max(T::min_positive_value()).min(hi))
            .collect();
        HeadTrace {
            query: query.iter().map(|&v| T::of(v)).collect(),
            channel_weights: q,
            mask,
        }
    }

    /// Backpropagates `upstream[i] = dLoss/dM_hat_i` for every head.
    pub fn backward(&self, trace: &ForwardTrace<T>, upstream: &[Vec<T>]) -> Result<Backward> {
        if trace.stamp != self.stamp {
            return Err(Error::StaleTrace(
                "model parameters changed since the forward pass".into(),
            ));
        }
        if upstream.len() != trace.heads.len() {
            return Err(Error::invalid(format!(
                "{} upstream gradients for {} heads",
                upstream.len(),
                trace.heads.len()
            )));
        }
        let plane = trace.intermediate.plane();
        if upstream.iter().any(|u| u.len() != plane) {
            return Err(Error::GeometryMismatch("upstream gradient size".into()));
        }
        let mut g = self.zero_gradients();
        let k = self.hyper.k;
        let d = self.hyper.embed_dim;
        let scale = self.slice(self.layout.combine_scale);
        let proj_w = self.slice(self.layout.proj_weight);
        let mut d_inter: Tensor<T> = Tensor::zeros(k, trace.intermediate.h, trace.intermediate.w);
        let mut query_grads = Vec::with_capacity(upstream.len());

        let off_scale = self.layout.tensors[self.layout.combine_scale].offset;
        let off_bias = self.layout.tensors[self.layout.combine_bias].offset;
        let off_pw = self.layout.tensors[self.layout.proj_weight].offset;
        let off_pb = self.layout.tensors[self.layout.proj_bias].offset;

        for (head, up) in trace.heads.iter().zip(upstream) {
            // dz = dL/dM_hat * sigma'(z)
            let dz: Vec<T> = up
                .iter()
                .zip(&head.mask)
                .map(|(&u, &m)| u * m * (T::one() - m))
                .collect();
            g.values[off_bias] += chunked_sum(&dz);
            let mut dq = vec![0.0f64; k];
            for j in 0..k {
                let s = chunked_dot(&dz, trace.intermediate.channel(j));
                g.values[off_scale + j] += head.channel_weights[j].f64() * s;
                dq[j] = scale[j].f64() * s;
                let coef = scale[j] * head.channel_weights[j];
                for (di, &z) in d_inter.channel_mut(j).iter_mut().zip(&dz) {
                    *di += coef * z;
                }
            }
            let mut dquery = vec![0.0f64; d];
            for j in 0..k {
                g.values[off_pb + j] += dq[j];
                for (t, qd) in head.query.iter().enumerate() {
                    g.values[off_pw + j * d + t] += dq[j] * qd.f64();
                    dquery[t] += dq[j] * proj_w[j * d + t].f64();
                }
            }
            query_grads.push(dquery);
        }

        let slope = T::of(self.hyper.leaky_slope);
        let levels = self.layout.dec.len();
        let top = if levels > 0 {
            &trace.dec_out[0]
        } else {
            &trace.enc_out[0]
        };
        let out = self.layout.out;
        let mut grad = self
            .conv_grad(top, out, &d_inter, 1, &mut g, true)
            .expect("input grad");

        // grad currently refers to `top`
        let mut enc_grads: Vec<Option<Tensor<T>>> = vec![None; self.hyper.depth];
        for l in 0..levels {
            leaky_backward(&mut grad, &trace.dec_out[l], slope);
            let slot = self.layout.dec[l];
            let gcat = self
                .conv_grad(&trace.dec_in[l], slot, &grad, 1, &mut g, true)
                .expect("input grad");
            let up_c = gcat.c - trace.enc_out[l].c;
            let (gup, gskip) = split_channels(gcat, up_c);
            add_into(&mut enc_grads[l], gskip);
            let below = if l + 1 == levels {
                &trace.enc_out[l + 1]
            } else {
                &trace.dec_out[l + 1]
            };
            grad = upsample2_backward(&gup, below.h, below.w);
        }
        if levels > 0 {
            add_into(&mut enc_grads[levels], grad);
        } else {
            add_into(&mut enc_grads[0], grad);
        }

        for l in (0..self.hyper.depth).rev() {
            let Some(mut ge) = enc_grads[l].take() else {
                continue;
            };
            leaky_backward(&mut ge, &trace.enc_out[l], slope);
            let slot = self.layout.enc[l];
            let (src, stride) = if l == 0 {
                (&trace.input, 1)
            } else {
                (&trace.enc_out[l - 1], 2)
            };
            let gin = self.conv_grad(src, slot, &ge, stride, &mut g, l > 0);
            if let Some(gin) = gin {
                add_into(&mut enc_grads[l - 1], gin);
            }
        }

        Ok(Backward {
            grads: g,
            query_grads,
        })
    }

    fn conv_grad(
        &self,
        input: &Tensor<T>,
        slot: ConvSlot,
        grad_out: &Tensor<T>,
        stride: usize,
        g: &mut Gradients,
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let wr = self.layout.range(slot.weight);
        let br = self.layout.range(slot.bias);
        let (gw, rest) = g.values.split_at_mut(br.start);
        let gw = &mut gw[wr.clone()];
        let gb = &mut rest[..br.len()];
        conv_backward(
            input,
            &self.params[wr],
            grad_out,
            slot.k,
            stride,
            gw,
            gb,
            need_input,
        )
    }

    /// Expected spatial size at every encoder level for a given input.
    pub fn level_shapes(&self, frames: usize, bins: usize) -> Vec<(usize, usize)> {
        let mut shapes = vec![(frames, bins)];
        for _ in 1..self.hyper.depth {
            let (h, w) = *shapes.last().expect("non-empty");
            shapes.push((conv_out_len(h, 3, 2), conv_out_len(w, 3, 2)));
        }
        shapes
    }
}

fn add_into<T: Real>(slot: &mut Option<Tensor<T>>, t: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data.iter_mut().zip(&t.data) {
                *a += *b;
            }
        }
        None => *slot = Some(t),
    }
}

#[cfg(test)]
mod tests;
