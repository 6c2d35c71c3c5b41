//! Minimal convolutional building blocks with hand-written backward passes.
//!
//! Activations are channels-first `(channels, height, width)` for a single
//! sample. Layers do not own their weights: they hold offsets into one flat
//! parameter vector, so snapshots, hashing and optimizer state are all plain
//! `Vec<f32>` operations.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Allocates consecutive parameter ranges.
#[derive(Debug, Default)]
pub struct ParamAllocator {
    len: usize,
}

impl ParamAllocator {
    pub fn take(&mut self, n: usize) -> usize {
        let off = self.len;
        self.len += n;
        off
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn view2(params: &[f32], off: usize, rows: usize, cols: usize) -> ArrayView2<'_, f32> {
    ArrayView2::from_shape((rows, cols), &params[off..off + rows * cols]).expect("parameter slice")
}

fn view2_mut(params: &mut [f32], off: usize, rows: usize, cols: usize) -> ArrayViewMut2<'_, f32> {
    ArrayViewMut2::from_shape((rows, cols), &mut params[off..off + rows * cols])
        .expect("parameter slice")
}

/// Square convolution with zero padding `kernel / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    w_off: usize,
    b_off: usize,
}

/// Saved im2col matrix plus the input extent.
pub struct ConvCache {
    cols: Array2<f32>,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

impl Conv2d {
    pub fn new(alloc: &mut ParamAllocator, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        let w_off = alloc.take(out_ch * in_ch * kernel * kernel);
        let b_off = alloc.take(out_ch);
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            w_off,
            b_off,
        }
    }

    fn fan_in(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    /// He-normal weights, zero bias.
    pub fn init(&self, params: &mut [f32], rng: &mut impl Rng) {
        let std = (2.0 / self.fan_in() as f32).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        for v in &mut params[self.w_off..self.w_off + self.out_ch * self.fan_in()] {
            *v = normal.sample(rng);
        }
        params[self.b_off..self.b_off + self.out_ch].fill(0.0);
    }

    pub fn zero(&self, params: &mut [f32]) {
        params[self.w_off..self.w_off + self.out_ch * self.fan_in()].fill(0.0);
        params[self.b_off..self.b_off + self.out_ch].fill(0.0);
    }

    fn out_extent(&self, extent: usize) -> usize {
        let pad = self.kernel / 2;
        (extent + 2 * pad - self.kernel) / self.stride + 1
    }

    pub fn forward(&self, params: &[f32], x: &Array3<f32>) -> (Array3<f32>, ConvCache) {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_ch);
        let (k, s, pad) = (self.kernel, self.stride, self.kernel / 2);
        let (oh, ow) = (self.out_extent(h), self.out_extent(w));
        let mut cols = Array2::<f32>::zeros((self.fan_in(), oh * ow));
        let xs = x.as_slice().expect("contiguous activations");
        {
            let cs = cols.as_slice_mut().expect("contiguous");
            for ch in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = ((ch * k + ky) * k + kx) * oh * ow;
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = (ch * h + iy as usize) * w;
                            let dst = row + oy * ow;
                            for ox in 0..ow {
                                let ix = (ox * s + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    cs[dst + ox] = xs[src + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let weight = view2(params, self.w_off, self.out_ch, self.fan_in());
        let mut y = Array2::<f32>::zeros((self.out_ch, oh * ow));
        general_mat_mul(1.0, &weight, &cols, 0.0, &mut y);
        let bias = &params[self.b_off..self.b_off + self.out_ch];
        for (mut row, &b) in y.outer_iter_mut().zip(bias) {
            row.mapv_inplace(|v| v + b);
        }
        let y = y.into_shape_with_order((self.out_ch, oh, ow)).expect("shape");
        (
            y,
            ConvCache {
                cols,
                in_h: h,
                in_w: w,
                out_h: oh,
                out_w: ow,
            },
        )
    }

    /// Accumulates parameter gradients into `grads` when given, and returns
    /// the input gradient when `want_input` is set.
    pub fn backward(
        &self,
        params: &[f32],
        cache: &ConvCache,
        dy: &Array3<f32>,
        grads: Option<&mut [f32]>,
        want_input: bool,
    ) -> Option<Array3<f32>> {
        let (oh, ow) = (cache.out_h, cache.out_w);
        let dy2 = dy
            .view()
            .into_shape_with_order((self.out_ch, oh * ow))
            .expect("contiguous gradient");
        if let Some(g) = grads {
            {
                let mut dw = view2_mut(g, self.w_off, self.out_ch, self.fan_in());
                general_mat_mul(1.0, &dy2, &cache.cols.t(), 1.0, &mut dw);
            }
            for (o, row) in dy2.outer_iter().enumerate() {
                g[self.b_off + o] += row.sum();
            }
        }
        if !want_input {
            return None;
        }
        let weight = view2(params, self.w_off, self.out_ch, self.fan_in());
        let mut dcols = Array2::<f32>::zeros((self.fan_in(), oh * ow));
        general_mat_mul(1.0, &weight.t(), &dy2, 0.0, &mut dcols);
        let (h, w) = (cache.in_h, cache.in_w);
        let (k, s, pad) = (self.kernel, self.stride, self.kernel / 2);
        let mut dx = Array3::<f32>::zeros((self.in_ch, h, w));
        let dxs = dx.as_slice_mut().expect("contiguous");
        let ds = dcols.as_slice().expect("contiguous");
        for ch in 0..self.in_ch {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ch * k + ky) * k + kx) * oh * ow;
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = (ch * h + iy as usize) * w;
                        let src = row + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * s + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dxs[dst + ix as usize] += ds[src + ox];
                            }
                        }
                    }
                }
            }
        }
        Some(dx)
    }
}

/// Transposed convolution with a 2x2 kernel and stride 2 (exact 2x upsampling).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTranspose2x2 {
    pub in_ch: usize,
    pub out_ch: usize,
    w_off: usize,
    b_off: usize,
}

pub struct ConvTCache {
    input: Array2<f32>,
    in_h: usize,
    in_w: usize,
}

impl ConvTranspose2x2 {
    pub fn new(alloc: &mut ParamAllocator, in_ch: usize, out_ch: usize) -> Self {
        let w_off = alloc.take(out_ch * 4 * in_ch);
        let b_off = alloc.take(out_ch);
        Self {
            in_ch,
            out_ch,
            w_off,
            b_off,
        }
    }

    pub fn init(&self, params: &mut [f32], rng: &mut impl Rng) {
        let std = (2.0 / self.in_ch as f32).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        for v in &mut params[self.w_off..self.w_off + self.out_ch * 4 * self.in_ch] {
            *v = normal.sample(rng);
        }
        params[self.b_off..self.b_off + self.out_ch].fill(0.0);
    }

    pub fn forward(&self, params: &[f32], x: &Array3<f32>) -> (Array3<f32>, ConvTCache) {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_ch);
        let input = x.clone().into_shape_with_order((c, h * w)).expect("shape");
        let weight = view2(params, self.w_off, self.out_ch * 4, self.in_ch);
        let mut blocks = Array2::<f32>::zeros((self.out_ch * 4, h * w));
        general_mat_mul(1.0, &weight, &input, 0.0, &mut blocks);
        let bias = &params[self.b_off..self.b_off + self.out_ch];
        let mut y = Array3::<f32>::zeros((self.out_ch, 2 * h, 2 * w));
        for o in 0..self.out_ch {
            for a in 0..2 {
                for b in 0..2 {
                    let src = blocks.row(o * 4 + a * 2 + b);
                    for i in 0..h {
                        for j in 0..w {
                            y[[o, 2 * i + a, 2 * j + b]] = src[i * w + j] + bias[o];
                        }
                    }
                }
            }
        }
        (
            y,
            ConvTCache {
                input,
                in_h: h,
                in_w: w,
            },
        )
    }

    pub fn backward(
        &self,
        params: &[f32],
        cache: &ConvTCache,
        dy: &Array3<f32>,
        grads: Option<&mut [f32]>,
        want_input: bool,
    ) -> Option<Array3<f32>> {
        let (h, w) = (cache.in_h, cache.in_w);
        let mut dblocks = Array2::<f32>::zeros((self.out_ch * 4, h * w));
        for o in 0..self.out_ch {
            for a in 0..2 {
                for b in 0..2 {
                    let mut dst = dblocks.row_mut(o * 4 + a * 2 + b);
                    for i in 0..h {
                        for j in 0..w {
                            dst[i * w + j] = dy[[o, 2 * i + a, 2 * j + b]];
                        }
                    }
                }
            }
        }
        if let Some(g) = grads {
            {
                let mut dw = view2_mut(g, self.w_off, self.out_ch * 4, self.in_ch);
                general_mat_mul(1.0, &dblocks, &cache.input.t(), 1.0, &mut dw);
            }
            for o in 0..self.out_ch {
                let mut s = 0.0;
                for a in 0..4 {
                    s += dblocks.row(o * 4 + a).sum();
                }
                g[self.b_off + o] += s;
            }
        }
        if !want_input {
            return None;
        }
        let weight = view2(params, self.w_off, self.out_ch * 4, self.in_ch);
        let mut dx = Array2::<f32>::zeros((self.in_ch, h * w));
        general_mat_mul(1.0, &weight.t(), &dblocks, 0.0, &mut dx);
        Some(dx.into_shape_with_order((self.in_ch, h, w)).expect("shape"))
    }
}

pub fn relu_inplace(x: &mut Array3<f32>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Gradient of ReLU given its output.
pub fn relu_backward(out: &Array3<f32>, dy: &mut Array3<f32>) {
    dy.zip_mut_with(out, |g, &o| {
        if o <= 0.0 {
            *g = 0.0
        }
    });
}

/// Inverted dropout mask: kept entries scaled by `1 / (1 - rate)`.
pub fn dropout_mask(dims: (usize, usize, usize), rate: f32, rng: &mut impl Rng) -> Array3<f32> {
    let keep = 1.0 / (1.0 - rate);
    Array3::from_shape_simple_fn(dims, || if rng.gen::<f32>() < rate { 0.0 } else { keep })
}

/// Softmax over the channel axis at every pixel, after dividing logits by
/// `temperature`.
pub fn softmax_channels(logits: &Array3<f32>, temperature: f32) -> Array3<f32> {
    let (n, h, w) = logits.dim();
    let mut out = Array3::<f32>::zeros((n, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut m = f32::MIN;
            for k in 0..n {
                m = m.max(logits[[k, y, x]] / temperature);
            }
            let mut sum = 0.0f32;
            for k in 0..n {
                let e = (logits[[k, y, x]] / temperature - m).exp();
                out[[k, y, x]] = e;
                sum += e;
            }
            for k in 0..n {
                out[[k, y, x]] /= sum;
            }
        }
    }
    out
}

/// Pulls a gradient with respect to softmax outputs back to the logits:
/// `dz_k = p_k (g_k - sum_j p_j g_j)`.
pub fn softmax_backward(probs: &Array3<f32>, dprobs: &Array3<f32>) -> Array3<f32> {
    let (n, h, w) = probs.dim();
    let mut out = Array3::<f32>::zeros((n, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut dot = 0.0f32;
            for k in 0..n {
                dot += probs[[k, y, x]] * dprobs[[k, y, x]];
            }
            for k in 0..n {
                out[[k, y, x]] = probs[[k, y, x]] * (dprobs[[k, y, x]] - dot);
            }
        }
    }
    out
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, learning_rate: f32) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.learning_rate * mh / (vh.sqrt() + self.epsilon);
        }
    }
}

/// Plain SGD, no momentum.
pub fn sgd_step(params: &mut [f32], grads: &[f32], learning_rate: f32) {
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= learning_rate * g;
    }
}
