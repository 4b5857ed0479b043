//! Minimal CPU layer library with hand-written backward passes.
//!
//! Activations are `(channels, height, width)` arrays of `f64`. Every layer
//! exposes a forward pass that returns whatever the backward pass needs, so
//! the networks built on top can run exact reverse-mode differentiation
//! without a general autograd tape.

use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub type Feature = Array3<f64>;

/// 2-D convolution with stride 1 and "same" zero padding (odd kernels only).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `(out_channels, in_channels * kernel * kernel)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub kernel: usize,
}

#[derive(Debug, Clone)]
pub struct ConvGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Saved state of one convolution call.
#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Array2<f64>,
    in_shape: (usize, usize, usize),
}

impl Conv2d {
    /// He-normal initialised weights, zero bias.
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut R) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let fan_in = in_ch * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        Self::with_std(in_ch, out_ch, kernel, std, 0.0, rng)
    }

    /// Normal(0, std) weights and a constant bias.
    pub fn with_std<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        std: f64,
        bias: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let normal = Normal::new(0.0, std).expect("valid std");
        let weight = Array2::from_shape_fn((out_ch, fan_in), |_| normal.sample(rng));
        Conv2d {
            weight,
            bias: Array1::from_elem(out_ch, bias),
            kernel,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.ncols() / (self.kernel * self.kernel)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn zero_grad(&self) -> ConvGrad {
        ConvGrad {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn forward(&self, x: ArrayView3<f64>) -> (Feature, ConvCache) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "conv input channel mismatch");
        let cols = im2col(x, self.kernel);
        let out = self.apply_cols(&cols, h, w);
        (
            out,
            ConvCache {
                cols,
                in_shape: (c, h, w),
            },
        )
    }

    /// Forward pass that keeps no cache.
    pub fn infer(&self, x: ArrayView3<f64>) -> Feature {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "conv input channel mismatch");
        if self.kernel == 1 {
            let flat = x.to_shape((c, h * w)).expect("contiguous view");
            let mut out = self.weight.dot(&flat);
            out += &self.bias.view().insert_axis(Axis(1));
            return out.into_shape_with_order((self.out_channels(), h, w)).expect("shape");
        }
        let cols = im2col(x, self.kernel);
        self.apply_cols(&cols, h, w)
    }

    fn apply_cols(&self, cols: &Array2<f64>, h: usize, w: usize) -> Feature {
        let mut out = self.weight.dot(cols);
        out += &self.bias.view().insert_axis(Axis(1));
        out.into_shape_with_order((self.out_channels(), h, w))
            .expect("conv output shape")
    }

    /// Accumulates parameter gradients into `grad`; returns the input gradient when asked.
    pub fn backward(
        &self,
        cache: &ConvCache,
        dy: &Feature,
        grad: &mut ConvGrad,
        need_dx: bool,
    ) -> Option<Feature> {
        let (c, h, w) = cache.in_shape;
        let dy2 = dy
            .view()
            .into_shape_with_order((self.out_channels(), h * w))
            .expect("contiguous gradient");
        grad.weight += &dy2.dot(&cache.cols.t());
        grad.bias += &dy2.sum_axis(Axis(1));
        if !need_dx {
            return None;
        }
        let dcols = self.weight.t().dot(&dy2);
        Some(col2im(&dcols, (c, h, w), self.kernel))
    }
}

fn im2col(x: ArrayView3<f64>, kernel: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let pad = kernel / 2;
    let kk = kernel * kernel;
    let mut cols = Array2::<f64>::zeros((c * kk, h * w));
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let out = cols.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        let plane = &xs[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = ci * kk + ky * kernel + kx;
                let dst = &mut out[row * h * w..(row + 1) * h * w];
                let dy = ky as isize - pad as isize;
                let dx = kx as isize - pad as isize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let src_lo = (x_lo as isize + dx) as usize;
                    let len = x_hi - x_lo;
                    dst[y * w + x_lo..y * w + x_hi]
                        .copy_from_slice(&plane[sy * w + src_lo..sy * w + src_lo + len]);
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, shape: (usize, usize, usize), kernel: usize) -> Feature {
    let (c, h, w) = shape;
    let pad = kernel / 2;
    let kk = kernel * kernel;
    let mut out = Array3::<f64>::zeros((c, h, w));
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let dst_all = out.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        let plane = &mut dst_all[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = ci * kk + ky * kernel + kx;
                let col = &src[row * h * w..(row + 1) * h * w];
                let dy = ky as isize - pad as isize;
                let dx = kx as isize - pad as isize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let src_lo = (x_lo as isize + dx) as usize;
                    let len = x_hi - x_lo;
                    let d = &mut plane[sy * w + src_lo..sy * w + src_lo + len];
                    for (a, b) in d.iter_mut().zip(&col[y * w + x_lo..y * w + x_hi]) {
                        *a += *b;
                    }
                }
            }
        }
    }
    out
}

pub fn relu_inplace(x: &mut Feature) {
    x.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

/// Gradient of ReLU given its output.
pub fn relu_backward(out: &Feature, dy: &Feature) -> Feature {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(out).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// 2x2 max pooling with stride 2. Returns the pooled map and the flat input
/// index of each maximum (first maximum wins on ties).
pub fn maxpool2(x: &Feature) -> (Feature, Vec<usize>) {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = (2 * y, 2 * xx);
                let mut best_v = x[[ci, 2 * y, 2 * xx]];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let v = x[[ci, 2 * y + dy, 2 * xx + dx]];
                    if v > best_v {
                        best_v = v;
                        best = (2 * y + dy, 2 * xx + dx);
                    }
                }
                out[[ci, y, xx]] = best_v;
                idx.push(ci * h * w + best.0 * w + best.1);
            }
        }
    }
    (out, idx)
}

pub fn maxpool2_backward(dy: &Feature, idx: &[usize], in_shape: (usize, usize, usize)) -> Feature {
    let mut dx = Array3::<f64>::zeros(in_shape);
    let flat = dx.as_slice_mut().expect("fresh array");
    for (g, &i) in dy.iter().zip(idx) {
        flat[i] += *g;
    }
    dx
}

/// Two-tap interpolation stencil of a x2 bilinear upsample (half-pixel centres,
/// edge clamped) along one axis.
fn upsample_taps(n: usize) -> Vec<[(usize, f64); 2]> {
    (0..2 * n)
        .map(|o| {
            let i = o / 2;
            if o % 2 == 0 {
                [(i.saturating_sub(1), 0.25), (i, 0.75)]
            } else {
                [(i, 0.75), ((i + 1).min(n - 1), 0.25)]
            }
        })
        .collect()
}

/// Bilinear x2 upsampling.
pub fn upsample2(x: &Feature) -> Feature {
    let (c, h, w) = x.dim();
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let mut out = Array3::<f64>::zeros((c, 2 * h, 2 * w));
    for ci in 0..c {
        let plane = x.index_axis(Axis(0), ci);
        let mut oplane = out.index_axis_mut(Axis(0), ci);
        for (oy, ry) in ty.iter().enumerate() {
            for (ox, rx) in tx.iter().enumerate() {
                let mut acc = 0.0;
                for &(sy, wy) in ry {
                    for &(sx, wx) in rx {
                        acc += wy * wx * plane[[sy, sx]];
                    }
                }
                oplane[[oy, ox]] = acc;
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &Feature) -> Feature {
    let (c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let mut dx = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        let g = dy.index_axis(Axis(0), ci);
        let mut d = dx.index_axis_mut(Axis(0), ci);
        for (oy, ry) in ty.iter().enumerate() {
            for (ox, rx) in tx.iter().enumerate() {
                let v = g[[oy, ox]];
                for &(sy, wy) in ry {
                    for &(sx, wx) in rx {
                        d[[sy, sx]] += wy * wx * v;
                    }
                }
            }
        }
    }
    dx
}

/// Channel concatenation.
pub fn concat(parts: &[&Feature]) -> Feature {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("matching spatial dims")
}

/// Splits a channel-concatenated gradient back into parts of the given widths.
pub fn split_channels(x: &Feature, widths: &[usize]) -> Vec<Feature> {
    let mut start = 0;
    widths
        .iter()
        .map(|&n| {
            let part = x.slice(s![start..start + n, .., ..]).to_owned();
            start += n;
            part
        })
        .collect()
}

/// Two 3x3 convolutions, each followed by ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub first: Conv2d,
    pub second: Conv2d,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    first: ConvCache,
    first_out: Feature,
    second: ConvCache,
    second_out: Feature,
}

impl ConvBlock {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        ConvBlock {
            first: Conv2d::new(in_ch, out_ch, 3, rng),
            second: Conv2d::new(out_ch, out_ch, 3, rng),
        }
    }

    pub fn forward(&self, x: &Feature) -> (Feature, BlockCache) {
        let (mut a, first) = self.first.forward(x.view());
        relu_inplace(&mut a);
        let (mut b, second) = self.second.forward(a.view());
        relu_inplace(&mut b);
        let cache = BlockCache {
            first,
            first_out: a,
            second,
            second_out: b.clone(),
        };
        (b, cache)
    }

    pub fn infer(&self, x: &Feature) -> Feature {
        let mut a = self.first.infer(x.view());
        relu_inplace(&mut a);
        let mut b = self.second.infer(a.view());
        relu_inplace(&mut b);
        b
    }

    /// `grads` holds the two convolution gradients in order.
    pub fn backward(
        &self,
        cache: &BlockCache,
        dy: &Feature,
        grads: &mut [ConvGrad],
        need_dx: bool,
    ) -> Option<Feature> {
        let (g1, g2) = grads.split_at_mut(1);
        let db = relu_backward(&cache.second_out, dy);
        let da = self
            .second
            .backward(&cache.second, &db, &mut g2[0], true)
            .expect("requested");
        let da = relu_backward(&cache.first_out, &da);
        self.first.backward(&cache.first, &da, &mut g1[0], need_dx)
    }
}

/// Anything that owns an ordered, named list of convolutions.
pub trait Parameterized {
    /// Stable (name, layer) pairs in a fixed order.
    fn named_convs(&self) -> Vec<(String, &Conv2d)>;
    fn convs_mut(&mut self) -> Vec<&mut Conv2d>;

    fn zero_grads(&self) -> Vec<ConvGrad> {
        self.named_convs().iter().map(|(_, c)| c.zero_grad()).collect()
    }

    fn num_params(&self) -> usize {
        self.named_convs()
            .iter()
            .map(|(_, c)| c.weight.len() + c.bias.len())
            .sum()
    }

    fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (name, conv) in self.named_convs() {
            let (o, i) = conv.weight.dim();
            let k = conv.kernel;
            out.push(NamedTensor {
                name: format!("{name}.weight"),
                shape: vec![o, i / (k * k), k, k],
                data: conv.weight.iter().copied().collect(),
            });
            out.push(NamedTensor {
                name: format!("{name}.bias"),
                shape: vec![o],
                data: conv.bias.to_vec(),
            });
        }
        out
    }

    /// Overwrites parameters from tensors produced by [`Parameterized::to_tensors`].
    fn load_tensors(&mut self, tensors: &[NamedTensor]) -> crate::Result<()> {
        let names: Vec<String> = self.named_convs().into_iter().map(|(n, _)| n).collect();
        let lookup = |key: &str| tensors.iter().find(|t| t.name == key);
        for (name, conv) in names.iter().zip(self.convs_mut()) {
            let w = lookup(&format!("{name}.weight")).ok_or_else(|| {
                crate::CoreSegError::invalid(format!("missing tensor {name}.weight"))
            })?;
            let b = lookup(&format!("{name}.bias")).ok_or_else(|| {
                crate::CoreSegError::invalid(format!("missing tensor {name}.bias"))
            })?;
            if w.data.len() != conv.weight.len() || b.data.len() != conv.bias.len() {
                return Err(crate::CoreSegError::shape(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    w.shape,
                    conv.weight.dim()
                )));
            }
            conv.weight = Array2::from_shape_vec(conv.weight.raw_dim(), w.data.clone())
                .expect("length checked");
            conv.bias = Array1::from_vec(b.data.clone());
        }
        Ok(())
    }
}

/// A flat parameter array with a stable name, used by checkpoints and fingerprints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub data: Vec<f64>,
}

/// Adam optimiser over a [`Parameterized`] model.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    first: Vec<ConvGrad>,
    second: Vec<ConvGrad>,
}

impl Adam {
    pub fn new<M: Parameterized + ?Sized>(model: &M, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: model.zero_grads(),
            second: model.zero_grads(),
        }
    }

    pub fn step<M: Parameterized + ?Sized>(&mut self, model: &mut M, grads: &[ConvGrad]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let convs = model.convs_mut();
        assert_eq!(convs.len(), grads.len(), "gradient list does not match model");
        for (((conv, g), m), v) in convs
            .into_iter()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            Zip::from(&mut conv.weight)
                .and(&g.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .for_each(|p, &g, m, v| adam_update(p, g, m, v, b1, b2, bc1, bc2, eps, lr));
            Zip::from(&mut conv.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(|p, &g, m, v| adam_update(p, g, m, v, b1, b2, bc1, bc2, eps, lr));
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn adam_update(
    p: &mut f64,
    g: f64,
    m: &mut f64,
    v: &mut f64,
    b1: f64,
    b2: f64,
    bc1: f64,
    bc2: f64,
    eps: f64,
    lr: f64,
) {
    *m = b1 * *m + (1.0 - b1) * g;
    *v = b2 * *v + (1.0 - b2) * g * g;
    let mhat = *m / bc1;
    let vhat = *v / bc2;
    *p -= lr * mhat / (vhat.sqrt() + eps);
}

/// Adds `src` into `dst` elementwise.
pub fn accumulate(dst: &mut [ConvGrad], src: &[ConvGrad]) {
    for (d, s) in dst.iter_mut().zip(src) {
        d.weight += &s.weight;
        d.bias += &s.bias;
    }
}

pub fn scale_grads(grads: &mut [ConvGrad], factor: f64) {
    for g in grads {
        g.weight *= factor;
        g.bias *= factor;
    }
}

/// Mean softmax cross-entropy over pixels whose label lies in `0..K`; other
/// labels contribute neither loss nor gradient. Returns `(loss, dlogits, count)`.
pub fn softmax_cross_entropy(logits: &Feature, labels: &Array2<i32>) -> (f64, Feature, usize) {
    let (k, h, w) = logits.dim();
    let mut grad = Array3::<f64>::zeros((k, h, w));
    let valid = labels.iter().filter(|&&l| l >= 0 && (l as usize) < k).count();
    if valid == 0 {
        return (0.0, grad, 0);
    }
    let norm = 1.0 / valid as f64;
    let mut loss = 0.0;
    let mut probs = vec![0.0; k];
    for y in 0..h {
        for x in 0..w {
            let label = labels[[y, x]];
            if label < 0 || label as usize >= k {
                continue;
            }
            let max = (0..k).map(|c| logits[[c, y, x]]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..k {
                probs[c] = (logits[[c, y, x]] - max).exp();
                z += probs[c];
            }
            let label = label as usize;
            loss += -(probs[label] / z).ln();
            for c in 0..k {
                let p = probs[c] / z;
                grad[[c, y, x]] = (p - if c == label { 1.0 } else { 0.0 }) * norm;
            }
        }
    }
    (loss * norm, grad, valid)
}
