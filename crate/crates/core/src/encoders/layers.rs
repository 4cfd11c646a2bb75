//! Layer forward/backward kernels.
//!
//! Tensors are `[batch, channels, height, width]` on the convolutional path
//! and `[batch, features]` on the flat path. Backward passes are exact
//! reverse-mode gradients of the train-mode forward, including the batch
//! statistic terms of batch normalization.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Dot product with four independent accumulators. Plain `zip`-fold
/// reductions serialize on the add latency chain; this form keeps the
/// summation order fixed (deterministic) while letting the lanes overlap.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..chunks {
        let j = 4 * i;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    let mut rest = 0.0;
    for j in 4 * chunks..n {
        rest += a[j] * b[j];
    }
    (s0 + s1) + (s2 + s3) + rest
}

/// Sum with four independent accumulators (same rationale as [`dot`]).
#[inline]
pub(crate) fn sum4(xs: &[f64]) -> f64 {
    let n = xs.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..chunks {
        let j = 4 * i;
        s0 += xs[j];
        s1 += xs[j + 1];
        s2 += xs[j + 2];
        s3 += xs[j + 3];
    }
    let mut rest = 0.0;
    for x in &xs[4 * chunks..] {
        rest += x;
    }
    (s0 + s1) + (s2 + s3) + rest
}

/// `Σ (x − mu)²` with four independent accumulators.
#[inline]
fn sum_sq_dev(xs: &[f64], mu: f64) -> f64 {
    let n = xs.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..chunks {
        let j = 4 * i;
        let (a, b, c, d) = (xs[j] - mu, xs[j + 1] - mu, xs[j + 2] - mu, xs[j + 3] - mu);
        s0 += a * a;
        s1 += b * b;
        s2 += c * c;
        s3 += d * d;
    }
    let mut rest = 0.0;
    for x in &xs[4 * chunks..] {
        let d = x - mu;
        rest += d * d;
    }
    (s0 + s1) + (s2 + s3) + rest
}

/// Per-layer state captured during a train-mode forward pass.
#[derive(Debug)]
pub(crate) enum LayerCache {
    Conv { input: Tensor },
    BatchNorm { xhat: Tensor, inv_std: Vec<f64> },
    Elu { input: Tensor },
    MaxPool { input_shape: Vec<usize>, argmax: Vec<u32> },
    GlobalAvgPool { input_shape: Vec<usize> },
    Dense { input: Tensor },
}

/// Parameter gradients for one layer, in the same order as
/// [`Layer::param_slices`].
#[derive(Debug, Clone)]
pub(crate) enum LayerGrads {
    Conv { dw: Vec<f64>, db: Vec<f64> },
    BatchNorm { dgamma: Vec<f64>, dbeta: Vec<f64> },
    Dense { dw: Vec<f64>, db: Vec<f64> },
    None,
}

impl LayerGrads {
    pub(crate) fn slices(&self) -> Vec<&[f64]> {
        match self {
            LayerGrads::Conv { dw, db } => vec![dw, db],
            LayerGrads::BatchNorm { dgamma, dbeta } => vec![dgamma, dbeta],
            LayerGrads::Dense { dw, db } => vec![dw, db],
            LayerGrads::None => Vec::new(),
        }
    }
}

// ── Convolution ─────────────────────────────────────────────────────

/// 2-D convolution, stride 1. Weight layout `[out][in][ky][kx]`.
#[derive(Debug, Clone)]
pub(crate) struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub pad: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn init(in_ch: usize, out_ch: usize, kernel: usize, pad: usize, rng: &mut Rng) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let limit = (6.0 / fan_in).sqrt();
        let weight = (0..out_ch * in_ch * kernel * kernel)
            .map(|_| rng.uniform_in(-limit, limit))
            .collect();
        Conv2d { in_ch, out_ch, kernel, pad, weight, bias: vec![0.0; out_ch] }
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        (h + 2 * self.pad - self.kernel + 1, w + 2 * self.pad - self.kernel + 1)
    }

    #[inline]
    fn w_at(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        let k = self.kernel;
        self.weight[((o * self.in_ch + i) * k + ky) * k + kx]
    }

    pub fn forward(&self, input: &Tensor) -> Tensor {
        let [b, c, h, w] = dims4(input);
        debug_assert_eq!(c, self.in_ch);
        let (oh, ow) = self.out_spatial(h, w);
        let mut out = Tensor::zeros(&[b, self.out_ch, oh, ow]);

        let in_plane = h * w;
        let out_plane = oh * ow;
        for bi in 0..b {
            let sample = input.sample(bi);
            let out_sample = out.sample_mut(bi);
            for o in 0..self.out_ch {
                let out_map = &mut out_sample[o * out_plane..(o + 1) * out_plane];
                out_map.fill(self.bias[o]);
                for i in 0..self.in_ch {
                    let in_map = &sample[i * in_plane..(i + 1) * in_plane];
                    for ky in 0..self.kernel {
                        for kx in 0..self.kernel {
                            let wv = self.w_at(o, i, ky, kx);
                            if wv == 0.0 {
                                continue;
                            }
                            accumulate_shifted(
                                out_map, in_map, wv, oh, ow, w, h, ky, kx, self.pad,
                            );
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(
        &self,
        input: &Tensor,
        grad_out: &Tensor,
    ) -> (Tensor, Vec<f64>, Vec<f64>) {
        let [b, _, h, w] = dims4(input);
        let [_, _, oh, ow] = dims4(grad_out);
        let mut grad_in = Tensor::zeros(input.shape());
        let mut dw = vec![0.0; self.weight.len()];
        let mut db = vec![0.0; self.out_ch];

        let in_plane = h * w;
        let out_plane = oh * ow;
        let k = self.kernel;
        for bi in 0..b {
            let sample = input.sample(bi);
            let gout_sample = grad_out.sample(bi);
            let gin_sample = grad_in.sample_mut(bi);
            for o in 0..self.out_ch {
                let gout_map = &gout_sample[o * out_plane..(o + 1) * out_plane];
                db[o] += gout_map.iter().sum::<f64>();
                for i in 0..self.in_ch {
                    let in_map = &sample[i * in_plane..(i + 1) * in_plane];
                    let gin_map = &mut gin_sample[i * in_plane..(i + 1) * in_plane];
                    for ky in 0..k {
                        for kx in 0..k {
                            let widx = ((o * self.in_ch + i) * k + ky) * k + kx;
                            let wv = self.weight[widx];
                            let mut dw_acc = 0.0;
                            // For each valid output row/col the forward pass did
                            //   out[y][x] += w · in[y+ky−p][x+kx−p];
                            // so dw += gout·in over the same window and
                            // gin[window] += w · gout.
                            for y in 0..oh {
                                let in_y = (y + ky) as isize - self.pad as isize;
                                if in_y < 0 || in_y >= h as isize {
                                    continue;
                                }
                                let (x_lo, x_hi) = valid_x_range(ow, w, kx, self.pad);
                                if x_lo >= x_hi {
                                    continue;
                                }
                                let shift = kx as isize - self.pad as isize;
                                let g_row = &gout_map[y * ow + x_lo..y * ow + x_hi];
                                let in_base = in_y as usize * w;
                                let lo = (x_lo as isize + shift) as usize;
                                let hi = (x_hi as isize + shift) as usize;
                                let in_row = &in_map[in_base + lo..in_base + hi];
                                dw_acc += dot(g_row, in_row);
                                if wv != 0.0 {
                                    let gin_row = &mut gin_map[in_base + lo..in_base + hi];
                                    for (gi, g) in gin_row.iter_mut().zip(g_row.iter()) {
                                        *gi += wv * g;
                                    }
                                }
                            }
                            dw[widx] += dw_acc;
                        }
                    }
                }
            }
        }
        (grad_in, dw, db)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// `out[y][x] += w · in[y+ky−p][x+kx−p]` over the valid range, row by row.
#[allow(clippy::too_many_arguments)]
#[inline]
fn accumulate_shifted(
    out_map: &mut [f64],
    in_map: &[f64],
    wv: f64,
    oh: usize,
    ow: usize,
    w: usize,
    h: usize,
    ky: usize,
    kx: usize,
    pad: usize,
) {
    let (x_lo, x_hi) = valid_x_range(ow, w, kx, pad);
    if x_lo >= x_hi {
        return;
    }
    let shift = kx as isize - pad as isize;
    for y in 0..oh {
        let in_y = (y + ky) as isize - pad as isize;
        if in_y < 0 || in_y >= h as isize {
            continue;
        }
        let out_row = &mut out_map[y * ow + x_lo..y * ow + x_hi];
        let in_base = in_y as usize * w;
        let lo = (x_lo as isize + shift) as usize;
        let hi = (x_hi as isize + shift) as usize;
        let in_row = &in_map[in_base + lo..in_base + hi];
        for (o, iv) in out_row.iter_mut().zip(in_row.iter()) {
            *o += wv * iv;
        }
    }
}

/// Output x interval where `x + kx − pad` stays inside `[0, w)`.
#[inline]
fn valid_x_range(ow: usize, w: usize, kx: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = ow.min(w + pad - kx);
    (lo, hi.max(lo))
}

// ── Batch normalization ─────────────────────────────────────────────

/// Per-channel batch normalization (per-feature on flat input). Population
/// (biased) variance is used for both batch statistics and running stats so
/// eval mode converges exactly to train mode on a repeated batch.
#[derive(Debug, Clone)]
pub(crate) struct BatchNorm {
    pub size: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn init(size: usize) -> Self {
        BatchNorm {
            size,
            gamma: vec![1.0; size],
            beta: vec![0.0; size],
            running_mean: vec![0.0; size],
            running_var: vec![1.0; size],
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    /// (channels, elements per channel per sample)
    fn channel_layout(&self, shape: &[usize]) -> (usize, usize) {
        match shape.len() {
            2 => (shape[1], 1),
            4 => (shape[1], shape[2] * shape[3]),
            _ => unreachable!("batch norm on rank {} tensor", shape.len()),
        }
    }

    pub fn forward_train(&mut self, input: &Tensor) -> (Tensor, LayerCache) {
        let (channels, inner) = self.channel_layout(input.shape());
        debug_assert_eq!(channels, self.size);
        let b = input.batch();
        let m = (b * inner) as f64;

        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        for bi in 0..b {
            let sample = input.sample(bi);
            for c in 0..channels {
                mean[c] += sum4(&sample[c * inner..(c + 1) * inner]);
            }
        }
        for mc in &mut mean {
            *mc /= m;
        }
        for bi in 0..b {
            let sample = input.sample(bi);
            for c in 0..channels {
                var[c] += sum_sq_dev(&sample[c * inner..(c + 1) * inner], mean[c]);
            }
        }
        for vc in &mut var {
            *vc /= m;
        }

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(input.shape());
        let mut out = Tensor::zeros(input.shape());
        for bi in 0..b {
            let sample = input.sample(bi);
            let xh = xhat.sample_mut(bi);
            let o = out.sample_mut(bi);
            for c in 0..channels {
                let mu = mean[c];
                let is = inv_std[c];
                let g = self.gamma[c];
                let be = self.beta[c];
                let range = c * inner..(c + 1) * inner;
                for ((dst_x, dst_o), src) in xh[range.clone()]
                    .iter_mut()
                    .zip(o[range.clone()].iter_mut())
                    .zip(sample[range].iter())
                {
                    let normalized = (src - mu) * is;
                    *dst_x = normalized;
                    *dst_o = g * normalized + be;
                }
            }
        }

        for c in 0..channels {
            self.running_mean[c] = self.momentum * self.running_mean[c] + (1.0 - self.momentum) * mean[c];
            self.running_var[c] = self.momentum * self.running_var[c] + (1.0 - self.momentum) * var[c];
        }

        (out, LayerCache::BatchNorm { xhat, inv_std })
    }

    pub fn forward_eval(&self, input: &Tensor) -> Tensor {
        let (channels, inner) = self.channel_layout(input.shape());
        let b = input.batch();
        let mut out = Tensor::zeros(input.shape());
        for bi in 0..b {
            let sample = input.sample(bi);
            let o = out.sample_mut(bi);
            for c in 0..channels {
                let is = 1.0 / (self.running_var[c] + self.eps).sqrt();
                let mu = self.running_mean[c];
                let g = self.gamma[c];
                let be = self.beta[c];
                for (dst, src) in o[c * inner..(c + 1) * inner]
                    .iter_mut()
                    .zip(sample[c * inner..(c + 1) * inner].iter())
                {
                    *dst = g * (src - mu) * is + be;
                }
            }
        }
        out
    }

    pub fn backward(
        &self,
        xhat: &Tensor,
        inv_std: &[f64],
        grad_out: &Tensor,
    ) -> (Tensor, Vec<f64>, Vec<f64>) {
        let (channels, inner) = self.channel_layout(xhat.shape());
        let b = xhat.batch();
        let m = (b * inner) as f64;

        let mut dbeta = vec![0.0; channels];
        let mut dgamma = vec![0.0; channels];
        for bi in 0..b {
            let go = grad_out.sample(bi);
            let xh = xhat.sample(bi);
            for c in 0..channels {
                let range = c * inner..(c + 1) * inner;
                dbeta[c] += sum4(&go[range.clone()]);
                dgamma[c] += dot(&go[range.clone()], &xh[range]);
            }
        }

        // dx = inv_std/m · γ · (m·go − Σgo − xhat·Σ(go·xhat))
        let mut grad_in = Tensor::zeros(xhat.shape());
        for bi in 0..b {
            let go = grad_out.sample(bi);
            let xh = xhat.sample(bi);
            let gi = grad_in.sample_mut(bi);
            for c in 0..channels {
                let factor = self.gamma[c] * inv_std[c] / m;
                let sum_go = dbeta[c];
                let sum_go_xhat = dgamma[c];
                for ((dst, g), x) in gi[c * inner..(c + 1) * inner]
                    .iter_mut()
                    .zip(go[c * inner..(c + 1) * inner].iter())
                    .zip(xh[c * inner..(c + 1) * inner].iter())
                {
                    *dst = factor * (m * g - sum_go - x * sum_go_xhat);
                }
            }
        }
        (grad_in, dgamma, dbeta)
    }

    pub fn param_count(&self) -> usize {
        2 * self.size
    }
}

// ── Activations and pooling ─────────────────────────────────────────

pub(crate) fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

pub(crate) fn elu_forward(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        *v = elu(*v);
    }
    out
}

pub(crate) fn elu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut grad_in = grad_out.clone();
    for (g, &x) in grad_in.data_mut().iter_mut().zip(input.data()) {
        if x < 0.0 {
            *g *= x.exp();
        }
    }
    grad_in
}

/// 2×2 max pooling, stride 2; trailing odd rows/columns are dropped.
pub(crate) fn maxpool_forward(input: &Tensor) -> (Tensor, Vec<u32>) {
    let [b, c, h, w] = dims4(input);
    let oh = h / 2;
    let ow = w / 2;
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let mut argmax = vec![0u32; b * c * oh * ow];
    let in_plane = h * w;
    let out_plane = oh * ow;
    let data = input.data();
    let out_data = out.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            let plane_base = (bi * c + ci) * in_plane;
            let out_base = (bi * c + ci) * out_plane;
            for y in 0..oh {
                for x in 0..ow {
                    let i0 = plane_base + 2 * y * w + 2 * x;
                    let candidates = [i0, i0 + 1, i0 + w, i0 + w + 1];
                    let mut best = candidates[0];
                    let mut best_v = data[best];
                    for &idx in &candidates[1..] {
                        if data[idx] > best_v {
                            best_v = data[idx];
                            best = idx;
                        }
                    }
                    out_data[out_base + y * ow + x] = best_v;
                    argmax[out_base + y * ow + x] = best as u32;
                }
            }
        }
    }
    (out, argmax)
}

pub(crate) fn maxpool_backward(
    input_shape: &[usize],
    argmax: &[u32],
    grad_out: &Tensor,
) -> Tensor {
    let mut grad_in = Tensor::zeros(input_shape);
    let gi = grad_in.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data().iter()) {
        gi[idx as usize] += g;
    }
    grad_in
}

/// `[b, c, h, w] → [b, c]` by spatial mean.
pub(crate) fn gap_forward(input: &Tensor) -> Tensor {
    let [b, c, h, w] = dims4(input);
    let plane = h * w;
    let inv = 1.0 / plane as f64;
    let mut out = Tensor::zeros(&[b, c]);
    for bi in 0..b {
        let sample = input.sample(bi);
        let o = out.sample_mut(bi);
        for ci in 0..c {
            o[ci] = sample[ci * plane..(ci + 1) * plane].iter().sum::<f64>() * inv;
        }
    }
    out
}

pub(crate) fn gap_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let (h, w) = (input_shape[2], input_shape[3]);
    let plane = h * w;
    let inv = 1.0 / plane as f64;
    let mut grad_in = Tensor::zeros(input_shape);
    let b = input_shape[0];
    let c = input_shape[1];
    for bi in 0..b {
        let go = grad_out.sample(bi);
        let gi = grad_in.sample_mut(bi);
        for ci in 0..c {
            let v = go[ci] * inv;
            for dst in &mut gi[ci * plane..(ci + 1) * plane] {
                *dst = v;
            }
        }
    }
    grad_in
}

// ── Dense ───────────────────────────────────────────────────────────

/// Fully connected layer. Weight layout `[in][out]`.
#[derive(Debug, Clone)]
pub(crate) struct Dense {
    pub in_f: usize,
    pub out_f: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn init(in_f: usize, out_f: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / in_f as f64).sqrt();
        let weight = (0..in_f * out_f).map(|_| rng.uniform_in(-limit, limit)).collect();
        Dense { in_f, out_f, weight, bias: vec![0.0; out_f] }
    }

    pub fn forward(&self, input: &Tensor) -> Tensor {
        let b = input.batch();
        let mut out = Tensor::zeros(&[b, self.out_f]);
        for bi in 0..b {
            let row = input.sample(bi);
            let o = out.sample_mut(bi);
            o.copy_from_slice(&self.bias);
            for (i, &a) in row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let w_row = &self.weight[i * self.out_f..(i + 1) * self.out_f];
                for (dst, &wv) in o.iter_mut().zip(w_row.iter()) {
                    *dst += a * wv;
                }
            }
        }
        out
    }

    pub fn backward(&self, input: &Tensor, grad_out: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
        let b = input.batch();
        let mut grad_in = Tensor::zeros(input.shape());
        let mut dw = vec![0.0; self.weight.len()];
        let mut db = vec![0.0; self.out_f];
        for bi in 0..b {
            let go = grad_out.sample(bi);
            for (d, &g) in db.iter_mut().zip(go.iter()) {
                *d += g;
            }
            let row = input.sample(bi);
            let gi = grad_in.sample_mut(bi);
            for (i, &a) in row.iter().enumerate() {
                let w_row = &self.weight[i * self.out_f..(i + 1) * self.out_f];
                let dw_row = &mut dw[i * self.out_f..(i + 1) * self.out_f];
                let mut acc = 0.0;
                for ((&g, &wv), d) in go.iter().zip(w_row.iter()).zip(dw_row.iter_mut()) {
                    acc += g * wv;
                    *d += a * g;
                }
                gi[i] = acc;
            }
        }
        (grad_in, dw, db)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

pub(crate) fn dims4(t: &Tensor) -> [usize; 4] {
    let s = t.shape();
    debug_assert_eq!(s.len(), 4, "expected rank-4 tensor, got {:?}", s);
    [s[0], s[1], s[2], s[3]]
}

/// Shape-checked conversion to `Result` dimensions for public entry points.
pub(crate) fn ensure_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.shape().len() != rank {
        return Err(Error::Dimension(format!(
            "{what}: expected rank-{rank} tensor, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}
