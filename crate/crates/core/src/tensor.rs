//! Dense rank-4 real tensors (N, C, H, W) and the primitive operations
//! every network in this crate is composed of.
//!
//! Conventions used throughout:
//! * convolution is cross-correlation without bias;
//! * `sign(0) = +1`;
//! * bilinear upsampling is corner-aligned with an exact factor of two;
//! * batch statistics use the population variance.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one (H, W) plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements in one sample (C, H, W).
    pub const fn sample(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn with_c(self, c: usize) -> Self {
        Shape { c, ..self }
    }

    fn validate(&self) -> Result<()> {
        if self.dims().contains(&0) {
            return Err(Error::shape("tensor", format!("all extents must be >= 1, got {self}")));
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape} needs {} values, got {}", shape.numel(), data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        assert!(shape.numel() > 0, "tensor extents must be >= 1, got {shape}");
        Tensor { shape, data: vec![value; shape.numel()] }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut t = Tensor::zeros(shape);
        let mut i = 0;
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        t.data[i] = f(n, c, h, w);
                        i += 1;
                    }
                }
            }
        }
        t
    }

    pub fn randn<R: Rng + ?Sized>(shape: Shape, std: f32, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f32, hi: f32, rng: &mut R) -> Self {
        let data = (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor { shape, data }
    }

    /// Random tensor with entries in {-1, +1}.
    pub fn random_sign<R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Self {
        let data = (0..shape.numel()).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let s = self.shape;
        ((n * s.c + c) * s.h + h) * s.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f32) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }

    /// Same data, different shape with the same element count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor { shape: self.shape, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.expect_same_shape(other, "zip_map")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape, data })
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&x| x as f64).sum()
    }

    pub fn mean_abs(&self) -> f64 {
        self.data.iter().map(|&x| x.abs() as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Sample `n` as a (1, C, H, W) tensor.
    pub fn sample(&self, n: usize) -> Tensor {
        let s = self.shape.sample();
        Tensor { shape: Shape { n: 1, ..self.shape }, data: self.data[n * s..(n + 1) * s].to_vec() }
    }

    /// Stack (1, C, H, W) samples (or any equal-(C,H,W) tensors) along the batch axis.
    pub fn stack(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::shape("stack", "no inputs"))?;
        let base = first.shape;
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.len()).sum());
        let mut n = 0;
        for t in parts {
            let s = t.shape;
            if (s.c, s.h, s.w) != (base.c, base.h, base.w) {
                return Err(Error::shape("stack", format!("{s} does not match {base}")));
            }
            n += s.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape: Shape { n, ..base }, data })
    }

    /// Channels `start..start + len` of every sample.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape;
        if len == 0 || start + len > s.c {
            return Err(Error::shape("narrow_channels", format!("{start}+{len} exceeds {} channels", s.c)));
        }
        let plane = s.plane();
        let mut data = Vec::with_capacity(s.n * len * plane);
        for n in 0..s.n {
            let base = (n * s.c + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Ok(Tensor { shape: s.with_c(len), data })
    }

    fn expect_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{} vs {}", self.shape, other.shape)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    pub const fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvParams { in_channels, out_channels, kernel, stride, padding }
    }

    /// Stride-1 convolution padded to preserve spatial extents (odd kernels).
    pub const fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvParams { in_channels, out_channels, kernel, stride: 1, padding: kernel / 2 }
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels, self.kernel, self.kernel)
    }

    pub fn weight_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    /// Output extent for an input extent; the division must be exact.
    pub fn output_extent(&self, input: usize) -> Result<usize> {
        if self.stride == 0 || self.kernel == 0 {
            return Err(Error::shape("conv2d", "stride and kernel must be positive"));
        }
        let padded = input + 2 * self.padding;
        if padded < self.kernel {
            return Err(Error::shape("conv2d", format!("kernel {} larger than padded input {padded}", self.kernel)));
        }
        let span = padded - self.kernel;
        if !span.is_multiple_of(self.stride) {
            return Err(Error::shape(
                "conv2d",
                format!("(in {input} + 2*pad {} - k {}) not divisible by stride {}", self.padding, self.kernel, self.stride),
            ));
        }
        Ok(span / self.stride + 1)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.in_channels {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, layer expects {}", input.c, self.in_channels),
            ));
        }
        Ok(Shape::new(input.n, self.out_channels, self.output_extent(input.h)?, self.output_extent(input.w)?))
    }
}

fn check_weights(weights: &Tensor, params: &ConvParams) -> Result<()> {
    if weights.shape() != params.weight_shape() {
        return Err(Error::shape(
            "conv2d",
            format!("weights {} do not match expected {}", weights.shape(), params.weight_shape()),
        ));
    }
    Ok(())
}

/// Unfolds one sample into a (C*k*k) x (OH*OW) matrix, filling padding with `pad_value`.
pub(crate) fn im2col(
    sample: &[f32],
    in_shape: Shape,
    params: &ConvParams,
    out_h: usize,
    out_w: usize,
    pad_value: f32,
    cols: &mut Vec<f32>,
) {
    let k = params.kernel;
    let p = out_h * out_w;
    cols.clear();
    cols.resize(in_shape.c * k * k * p, pad_value);
    let (h, w) = (in_shape.h as isize, in_shape.w as isize);
    let pad = params.padding as isize;
    let stride = params.stride as isize;
    for c in 0..in_shape.c {
        let plane = &sample[c * in_shape.plane()..(c + 1) * in_shape.plane()];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * p;
                for oy in 0..out_h {
                    let iy = oy as isize * stride + ky as isize - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let src = &plane[iy as usize * in_shape.w..(iy as usize + 1) * in_shape.w];
                    let dst = &mut cols[row + oy * out_w..row + (oy + 1) * out_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = ox as isize * stride + kx as isize - pad;
                        if ix >= 0 && ix < w {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f32], in_shape: Shape, params: &ConvParams, out_h: usize, out_w: usize, sample: &mut [f32]) {
    let k = params.kernel;
    let p = out_h * out_w;
    let (h, w) = (in_shape.h as isize, in_shape.w as isize);
    let pad = params.padding as isize;
    let stride = params.stride as isize;
    for c in 0..in_shape.c {
        let plane = &mut sample[c * in_shape.plane()..(c + 1) * in_shape.plane()];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * p;
                for oy in 0..out_h {
                    let iy = oy as isize * stride + ky as isize - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * in_shape.w..(iy as usize + 1) * in_shape.w];
                    let src = &cols[row + oy * out_w..row + (oy + 1) * out_w];
                    for (ox, &g) in src.iter().enumerate() {
                        let ix = ox as isize * stride + kx as isize - pad;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(params: &ConvParams) -> bool {
    params.kernel == 1 && params.stride == 1 && params.padding == 0
}

/// Row-major `c (m x n) = a (m x k) * b (k x n) + beta * c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Cross-correlation of `input` (N, C, H, W) with `weights` (O, C, k, k); no bias.
pub fn conv2d(input: &Tensor, weights: &Tensor, params: &ConvParams) -> Result<Tensor> {
    conv2d_padded(input, weights, params, 0.0)
}

/// Like [`conv2d`] but padding cells hold `pad_value` instead of zero.
pub fn conv2d_padded(input: &Tensor, weights: &Tensor, params: &ConvParams, pad_value: f32) -> Result<Tensor> {
    check_weights(weights, params)?;
    let in_shape = input.shape();
    let out_shape = params.output_shape(in_shape)?;
    let p = out_shape.plane();
    let kdim = params.in_channels * params.kernel * params.kernel;
    let mut out = Tensor::zeros(out_shape);
    let mut cols = Vec::new();
    for n in 0..in_shape.n {
        let x = &input.data[n * in_shape.sample()..(n + 1) * in_shape.sample()];
        let y = &mut out.data[n * out_shape.sample()..(n + 1) * out_shape.sample()];
        if is_pointwise(params) {
            gemm(params.out_channels, kdim, p, &weights.data, x, 0.0, y);
        } else {
            im2col(x, in_shape, params, out_shape.h, out_shape.w, pad_value, &mut cols);
            gemm(params.out_channels, kdim, p, &weights.data, &cols, 0.0, y);
        }
    }
    Ok(out)
}

/// Gradient of a convolution with respect to its input.
pub fn conv2d_grad_input(grad_out: &Tensor, weights: &Tensor, params: &ConvParams, in_shape: Shape) -> Result<Tensor> {
    check_weights(weights, params)?;
    let out_shape = params.output_shape(in_shape)?;
    if grad_out.shape() != out_shape {
        return Err(Error::shape("conv2d_grad_input", format!("grad {} vs output {}", grad_out.shape(), out_shape)));
    }
    let p = out_shape.plane();
    let kdim = params.in_channels * params.kernel * params.kernel;
    let o = params.out_channels;
    // W^T laid out row-major (kdim x o)
    let mut wt = vec![0.0f32; kdim * o];
    for oc in 0..o {
        for j in 0..kdim {
            wt[j * o + oc] = weights.data[oc * kdim + j];
        }
    }
    let mut grad_in = Tensor::zeros(in_shape);
    let mut cols = vec![0.0f32; kdim * p];
    for n in 0..in_shape.n {
        let gy = &grad_out.data[n * out_shape.sample()..(n + 1) * out_shape.sample()];
        let gx = &mut grad_in.data[n * in_shape.sample()..(n + 1) * in_shape.sample()];
        if is_pointwise(params) {
            gemm(kdim, o, p, &wt, gy, 0.0, gx);
        } else {
            gemm(kdim, o, p, &wt, gy, 0.0, &mut cols);
            col2im_add(&cols, in_shape, params, out_shape.h, out_shape.w, gx);
        }
    }
    Ok(grad_in)
}

/// Gradient of a convolution with respect to its weights.
pub fn conv2d_grad_weight(grad_out: &Tensor, input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    conv2d_grad_weight_padded(grad_out, input, params, 0.0)
}

pub fn conv2d_grad_weight_padded(grad_out: &Tensor, input: &Tensor, params: &ConvParams, pad_value: f32) -> Result<Tensor> {
    let in_shape = input.shape();
    let out_shape = params.output_shape(in_shape)?;
    if grad_out.shape() != out_shape {
        return Err(Error::shape("conv2d_grad_weight", format!("grad {} vs output {}", grad_out.shape(), out_shape)));
    }
    let p = out_shape.plane();
    let kdim = params.in_channels * params.kernel * params.kernel;
    let o = params.out_channels;
    let mut gw = Tensor::zeros(params.weight_shape());
    let mut cols = Vec::new();
    let mut cols_t = vec![0.0f32; p * kdim];
    for n in 0..in_shape.n {
        let x = &input.data[n * in_shape.sample()..(n + 1) * in_shape.sample()];
        let gy = &grad_out.data[n * out_shape.sample()..(n + 1) * out_shape.sample()];
        let src: &[f32] = if is_pointwise(params) {
            x
        } else {
            im2col(x, in_shape, params, out_shape.h, out_shape.w, pad_value, &mut cols);
            &cols
        };
        for j in 0..kdim {
            for q in 0..p {
                cols_t[q * kdim + j] = src[j * p + q];
            }
        }
        gemm(o, p, kdim, gy, &cols_t, 1.0, &mut gw.data);
    }
    Ok(gw)
}

fn check_even(input: &Tensor, op: &'static str) -> Result<()> {
    let s = input.shape();
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(Error::shape(op, format!("spatial extents must be even, got {}x{}", s.h, s.w)));
    }
    Ok(())
}

/// 2x2 max pooling with stride 2. Returns the output and, per output element,
/// the flat input index of the selected maximum (first in row-major window order on ties).
pub fn maxpool2_with_indices(input: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    check_even(input, "maxpool2")?;
    let s = input.shape();
    let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Tensor::zeros(os);
    let mut idx = vec![0u32; os.numel()];
    let mut o = 0;
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for oy in 0..os.h {
            for ox in 0..os.w {
                let mut best = base + (2 * oy) * s.w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * s.w + 2 * ox + dx;
                    if input.data[i] > input.data[best] {
                        best = i;
                    }
                }
                out.data[o] = input.data[best];
                idx[o] = best as u32;
                o += 1;
            }
        }
    }
    Ok((out, idx))
}

pub fn maxpool2(input: &Tensor) -> Result<Tensor> {
    maxpool2_with_indices(input).map(|(t, _)| t)
}

pub fn maxpool2_backward(grad_out: &Tensor, indices: &[u32], in_shape: Shape) -> Tensor {
    let mut g = Tensor::zeros(in_shape);
    for (&i, &v) in indices.iter().zip(&grad_out.data) {
        g.data[i as usize] += v;
    }
    g
}

/// 2x2 average pooling with stride 2.
pub fn avgpool2(input: &Tensor) -> Result<Tensor> {
    check_even(input, "avgpool2")?;
    let s = input.shape();
    let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Tensor::zeros(os);
    let mut o = 0;
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for oy in 0..os.h {
            for ox in 0..os.w {
                let i = base + 2 * oy * s.w + 2 * ox;
                let d = &input.data;
                out.data[o] = (d[i] + d[i + 1] + d[i + s.w] + d[i + s.w + 1]) * 0.25;
                o += 1;
            }
        }
    }
    Ok(out)
}

pub fn avgpool2_backward(grad_out: &Tensor, in_shape: Shape) -> Tensor {
    let mut g = Tensor::zeros(in_shape);
    let os = grad_out.shape();
    let mut o = 0;
    for nc in 0..in_shape.n * in_shape.c {
        let base = nc * in_shape.plane();
        for oy in 0..os.h {
            for ox in 0..os.w {
                let v = grad_out.data[o] * 0.25;
                let i = base + 2 * oy * in_shape.w + 2 * ox;
                g.data[i] += v;
                g.data[i + 1] += v;
                g.data[i + in_shape.w] += v;
                g.data[i + in_shape.w + 1] += v;
                o += 1;
            }
        }
    }
    g
}

/// Source taps for one axis of a corner-aligned x2 upsample: (lo, hi, frac).
fn upsample_taps(n: usize) -> Vec<(usize, usize, f32)> {
    let out = 2 * n;
    (0..out)
        .map(|i| {
            if n == 1 {
                return (0, 0, 0.0);
            }
            let src = i as f64 * (n - 1) as f64 / (out - 1) as f64;
            let lo = (src.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            (lo, hi, (src - lo as f64) as f32)
        })
        .collect()
}

/// Corner-aligned bilinear upsampling by exactly two in H and W.
pub fn upsample_bilinear2(input: &Tensor) -> Tensor {
    let s = input.shape();
    let os = Shape::new(s.n, s.c, 2 * s.h, 2 * s.w);
    let ty = upsample_taps(s.h);
    let tx = upsample_taps(s.w);
    let mut out = Tensor::zeros(os);
    let mut o = 0;
    for nc in 0..s.n * s.c {
        let plane = &input.data[nc * s.plane()..(nc + 1) * s.plane()];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = plane[y0 * s.w + x0] * (1.0 - fx) + plane[y0 * s.w + x1] * fx;
                let bot = plane[y1 * s.w + x0] * (1.0 - fx) + plane[y1 * s.w + x1] * fx;
                out.data[o] = top * (1.0 - fy) + bot * fy;
                o += 1;
            }
        }
    }
    out
}

pub fn upsample_bilinear2_backward(grad_out: &Tensor, in_shape: Shape) -> Tensor {
    let s = in_shape;
    let ty = upsample_taps(s.h);
    let tx = upsample_taps(s.w);
    let mut g = Tensor::zeros(in_shape);
    let mut o = 0;
    for nc in 0..s.n * s.c {
        let plane = &mut g.data[nc * s.plane()..(nc + 1) * s.plane()];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let v = grad_out.data[o];
                plane[y0 * s.w + x0] += v * (1.0 - fy) * (1.0 - fx);
                plane[y0 * s.w + x1] += v * (1.0 - fy) * fx;
                plane[y1 * s.w + x0] += v * fy * (1.0 - fx);
                plane[y1 * s.w + x1] += v * fy * fx;
                o += 1;
            }
        }
    }
    g
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
    pub momentum: f32,
}

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// Per-channel `(a, b)` such that inference output is `a * x + b`.
    pub fn inference_affine(&self) -> (Vec<f32>, Vec<f32>) {
        inference_affine(&self.scale, &self.shift, &self.running_mean, &self.running_var, self.eps)
    }
}

pub(crate) fn inference_affine(scale: &[f32], shift: &[f32], mean: &[f32], var: &[f32], eps: f32) -> (Vec<f32>, Vec<f32>) {
    let a: Vec<f32> = scale.iter().zip(var).map(|(&g, &v)| g / (v + eps).sqrt()).collect();
    let b = shift.iter().zip(mean).zip(&a).map(|((&beta, &m), &a)| beta - m * a).collect();
    (a, b)
}

/// Per-channel `a * x + b`.
pub fn channel_affine(input: &Tensor, a: &[f32], b: &[f32]) -> Tensor {
    let s = input.shape();
    let mut out = input.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let start = (n * s.c + c) * s.plane();
            for v in &mut out.data[start..start + s.plane()] {
                *v = a[c] * *v + b[c];
            }
        }
    }
    out
}

/// Cached quantities from a training-mode batch norm forward.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f32>,
}

/// Per-channel population mean and variance over (N, H, W).
pub fn channel_stats(input: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let s = input.shape();
    let count = (s.n * s.plane()) as f64;
    let mut mean = vec![0.0f64; s.c];
    let mut var = vec![0.0f64; s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let start = (n * s.c + c) * s.plane();
            mean[c] += input.data[start..start + s.plane()].iter().map(|&x| x as f64).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for n in 0..s.n {
        for c in 0..s.c {
            let start = (n * s.c + c) * s.plane();
            var[c] += input.data[start..start + s.plane()].iter().map(|&x| (x as f64 - mean[c]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean.into_iter().map(|m| m as f32).collect(), var.into_iter().map(|v| v as f32).collect())
}

/// Training-mode normalization with batch statistics; does not touch running statistics.
pub fn batchnorm_train(input: &Tensor, scale: &[f32], shift: &[f32], eps: f32) -> Result<(Tensor, BatchNormCache, Vec<f32>, Vec<f32>)> {
    let s = input.shape();
    if scale.len() != s.c || shift.len() != s.c {
        return Err(Error::shape("batchnorm", format!("{} channels vs {} parameters", s.c, scale.len())));
    }
    let (mean, var) = channel_stats(input);
    let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = input.clone();
    let mut out = input.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let start = (n * s.c + c) * s.plane();
            for i in start..start + s.plane() {
                let xh = (input.data[i] - mean[c]) * inv_std[c];
                xhat.data[i] = xh;
                out.data[i] = scale[c] * xh + shift[c];
            }
        }
    }
    Ok((out, BatchNormCache { xhat, inv_std }, mean, var))
}

/// Backward of [`batchnorm_train`]: returns (d input, d scale, d shift).
pub fn batchnorm_train_backward(grad_out: &Tensor, cache: &BatchNormCache, scale: &[f32]) -> (Tensor, Vec<f32>, Vec<f32>) {
    let s = grad_out.shape();
    let count = (s.n * s.plane()) as f64;
    let mut dscale = vec![0.0f64; s.c];
    let mut dshift = vec![0.0f64; s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let start = (n * s.c + c) * s.plane();
            for i in start..start + s.plane() {
                let g = grad_out.data[i] as f64;
                dshift[c] += g;
                dscale[c] += g * cache.xhat.data[i] as f64;
            }
        }
    }
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let start = (n * s.c + c) * s.plane();
            let k = scale[c] as f64 * cache.inv_std[c] as f64 / count;
            for i in start..start + s.plane() {
                let g = grad_out.data[i] as f64;
                let xh = cache.xhat.data[i] as f64;
                dx.data[i] = (k * (count * g - dshift[c] - xh * dscale[c])) as f32;
            }
        }
    }
    (dx, dscale.into_iter().map(|v| v as f32).collect(), dshift.into_iter().map(|v| v as f32).collect())
}

/// Batch normalization. Training mode normalizes by batch statistics and
/// folds them into the running statistics with `state.momentum`; inference
/// mode uses the running statistics.
pub fn batchnorm(input: &Tensor, state: &mut BatchNormState, training: bool) -> Result<Tensor> {
    let c = input.shape().c;
    if state.channels() != c {
        return Err(Error::shape("batchnorm", format!("{c} channels vs state for {}", state.channels())));
    }
    if training {
        let (out, _, mean, var) = batchnorm_train(input, &state.scale, &state.shift, state.eps)?;
        let m = state.momentum;
        for ch in 0..c {
            state.running_mean[ch] = (1.0 - m) * state.running_mean[ch] + m * mean[ch];
            state.running_var[ch] = (1.0 - m) * state.running_var[ch] + m * var[ch];
        }
        Ok(out)
    } else {
        let (a, b) = state.inference_affine();
        Ok(channel_affine(input, &a, &b))
    }
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|x| x.max(0.0))
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = input.data.iter().zip(&grad_out.data).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect();
    Tensor { shape: input.shape, data }
}

#[inline]
pub fn sign_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Elementwise sign into {-1, +1} with `sign(0) = +1`.
pub fn sign(input: &Tensor) -> Tensor {
    input.map(sign_scalar)
}

/// Concatenate along channels; all other extents must agree.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
    let base = first.shape();
    for t in parts {
        let s = t.shape();
        if (s.n, s.h, s.w) != (base.n, base.h, base.w) {
            return Err(Error::shape("concat", format!("{s} incompatible with {base}")));
        }
    }
    let c: usize = parts.iter().map(|t| t.shape().c).sum();
    let shape = base.with_c(c);
    let mut data = Vec::with_capacity(shape.numel());
    for n in 0..base.n {
        for t in parts {
            let ss = t.shape().sample();
            data.extend_from_slice(&t.data[n * ss..(n + 1) * ss]);
        }
    }
    Ok(Tensor { shape, data })
}

/// Inverse of [`concat_channels`] for the given channel counts.
pub fn split_channels(input: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    if sizes.iter().sum::<usize>() != input.shape().c {
        return Err(Error::shape("split", format!("sizes {sizes:?} do not sum to {}", input.shape().c)));
    }
    let mut start = 0;
    sizes
        .iter()
        .map(|&len| {
            let t = input.narrow_channels(start, len);
            start += len;
            t
        })
        .collect()
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x + y).map_err(|_| Error::shape("add", format!("{} vs {}", a.shape(), b.shape())))
}

/// Pads H and W by `pad` cells on each side with a constant value.
pub fn pad_const(input: &Tensor, pad: usize, value: f32) -> Tensor {
    if pad == 0 {
        return input.clone();
    }
    let s = input.shape();
    let os = Shape::new(s.n, s.c, s.h + 2 * pad, s.w + 2 * pad);
    let mut out = Tensor::full(os, value);
    for nc in 0..s.n * s.c {
        for y in 0..s.h {
            let src = nc * s.plane() + y * s.w;
            let dst = nc * os.plane() + (y + pad) * os.w + pad;
            out.data[dst..dst + s.w].copy_from_slice(&input.data[src..src + s.w]);
        }
    }
    out
}

/// Inverse of [`pad_const`]: drops `pad` border cells.
pub fn crop(input: &Tensor, pad: usize) -> Tensor {
    if pad == 0 {
        return input.clone();
    }
    let s = input.shape();
    let os = Shape::new(s.n, s.c, s.h - 2 * pad, s.w - 2 * pad);
    let mut out = Tensor::zeros(os);
    for nc in 0..s.n * s.c {
        for y in 0..os.h {
            let src = nc * s.plane() + (y + pad) * s.w + pad;
            let dst = nc * os.plane() + y * os.w;
            out.data[dst..dst + os.w].copy_from_slice(&input.data[src..src + os.w]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Direct six-nested-loop convolution in f64.
    fn conv_oracle(x: &Tensor, w: &Tensor, p: &ConvParams) -> Vec<f64> {
        let s = x.shape();
        let oh = (s.h + 2 * p.padding - p.kernel) / p.stride + 1;
        let ow = (s.w + 2 * p.padding - p.kernel) / p.stride + 1;
        let mut out = vec![0.0; s.n * p.out_channels * oh * ow];
        for n in 0..s.n {
            for o in 0..p.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f64;
                        for c in 0..s.c {
                            for ky in 0..p.kernel {
                                for kx in 0..p.kernel {
                                    let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                                    let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                                        acc += x.at(n, c, iy as usize, ix as usize) as f64 * w.at(o, c, ky, kx) as f64;
                                    }
                                }
                            }
                        }
                        out[((n * p.out_channels + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_scalar_product() {
        let x = Tensor::new(Shape::new(1, 1, 1, 1), vec![2.0]).unwrap();
        let w = Tensor::new(Shape::new(1, 1, 1, 1), vec![3.0]).unwrap();
        let y = conv2d(&x, &w, &ConvParams::new(1, 1, 1, 1, 0)).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::randn(Shape::new(2, 3, 5, 4), 1.0, &mut rng(1));
        let p = ConvParams::same(3, 3, 1);
        let w = Tensor::from_fn(p.weight_shape(), |o, i, _, _| if o == i { 1.0 } else { 0.0 });
        assert_eq!(conv2d(&x, &w, &p).unwrap(), x);
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut r = rng(2);
        let x = Tensor::randn(Shape::new(1, 4, 8, 8), 1.0, &mut r);
        let p = ConvParams::new(4, 6, 3, 1, 1);
        let w = Tensor::randn(p.weight_shape(), 1.0, &mut r);
        let y = conv2d(&x, &w, &p).unwrap();
        let oracle = conv_oracle(&x, &w, &p);
        for (a, b) in y.data().iter().zip(&oracle) {
            assert!((*a as f64 - b).abs() <= 1e-5 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn conv_strided_matches_oracle() {
        let mut r = rng(3);
        let x = Tensor::randn(Shape::new(2, 3, 9, 9), 1.0, &mut r);
        let p = ConvParams::new(3, 5, 3, 2, 1);
        let w = Tensor::randn(p.weight_shape(), 1.0, &mut r);
        let y = conv2d(&x, &w, &p).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 5, 5, 5));
        for (a, b) in y.data().iter().zip(conv_oracle(&x, &w, &p)) {
            assert!((*a as f64 - b).abs() <= 1e-4 * b.abs().max(1.0));
        }
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::zeros(Shape::new(1, 2, 4, 4));
        let p = ConvParams::new(3, 1, 3, 1, 1);
        let w = Tensor::zeros(p.weight_shape());
        assert!(matches!(conv2d(&x, &w, &p), Err(Error::Shape { .. })));
        // inexact stride division
        let p = ConvParams::new(2, 1, 3, 2, 0);
        let w = Tensor::zeros(p.weight_shape());
        assert!(conv2d(&x, &w, &p).is_err());
        // wrong weight shape
        let p = ConvParams::new(2, 1, 3, 1, 1);
        assert!(conv2d(&x, &Tensor::zeros(Shape::new(1, 2, 1, 1)), &p).is_err());
    }

    #[test]
    fn conv_all_ones_is_local_sum() {
        let mut r = rng(4);
        let x = Tensor::from_fn(Shape::new(1, 1, 6, 7), |_, _, _, _| r.gen_range(-5..=5) as f32);
        let p = ConvParams::same(1, 1, 3);
        let y = conv2d(&x, &Tensor::full(p.weight_shape(), 1.0), &p).unwrap();
        for yy in 0..6 {
            for xx in 0..7 {
                let mut s = 0.0;
                for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        let (iy, ix) = (yy as i32 + dy, xx as i32 + dx);
                        if (0..6).contains(&iy) && (0..7).contains(&ix) {
                            s += x.at(0, 0, iy as usize, ix as usize);
                        }
                    }
                }
                assert_eq!(y.at(0, 0, yy, xx), s);
            }
        }
    }

    #[test]
    fn pooling_window_values() {
        let x = Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2(&x).unwrap().data(), &[4.0]);
        assert_eq!(avgpool2(&x).unwrap().data(), &[2.5]);
        let c = Tensor::full(Shape::new(2, 3, 4, 6), 1.5);
        assert!(maxpool2(&c).unwrap().data().iter().all(|&v| v == 1.5));
        assert!(avgpool2(&c).unwrap().data().iter().all(|&v| v == 1.5));
        assert!(maxpool2(&Tensor::zeros(Shape::new(1, 1, 3, 4))).is_err());
        assert!(avgpool2(&Tensor::zeros(Shape::new(1, 1, 4, 5))).is_err());
    }

    #[test]
    fn pooling_matches_window_oracle() {
        let x = Tensor::randn(Shape::new(1, 2, 6, 6), 1.0, &mut rng(5));
        let mx = maxpool2(&x).unwrap();
        let av = avgpool2(&x).unwrap();
        for c in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let w = [
                        x.at(0, c, 2 * oy, 2 * ox),
                        x.at(0, c, 2 * oy, 2 * ox + 1),
                        x.at(0, c, 2 * oy + 1, 2 * ox),
                        x.at(0, c, 2 * oy + 1, 2 * ox + 1),
                    ];
                    assert_eq!(mx.at(0, c, oy, ox), w.iter().cloned().fold(f32::MIN, f32::max));
                    assert_eq!(av.at(0, c, oy, ox), (w[0] + w[1] + w[2] + w[3]) * 0.25);
                }
            }
        }
    }

    #[test]
    fn upsample_corner_aligned() {
        let x = Tensor::new(Shape::new(1, 1, 2, 2), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = upsample_bilinear2(&x);
        assert_eq!(y.shape(), Shape::new(1, 1, 4, 4));
        // f(y, x) = 2y + x on the unit square sampled at i/3
        for i in 0..4 {
            for j in 0..4 {
                let expect = 2.0 * i as f32 / 3.0 + j as f32 / 3.0;
                assert!((y.at(0, 0, i, j) - expect).abs() < 1e-6);
            }
        }
        let c = Tensor::full(Shape::new(1, 2, 3, 5), -0.75);
        let up = upsample_bilinear2(&c);
        assert!(up.data().iter().all(|&v| (v + 0.75).abs() < 1e-6));
        assert_eq!(avgpool2(&up).unwrap().max_abs_diff(&c), 0.0);
    }

    #[test]
    fn batchnorm_identity_on_standardized_input() {
        let x = Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let mut st = BatchNormState::new(1);
        let y = batchnorm(&x, &mut st, true).unwrap();
        assert!(y.max_abs_diff(&x) <= 1e-4);
    }

    #[test]
    fn batchnorm_constant_input_gives_shift() {
        let x = Tensor::full(Shape::new(2, 3, 4, 4), 7.0);
        let mut st = BatchNormState::new(3);
        st.shift = vec![0.5, -1.0, 2.0];
        let y = batchnorm(&x, &mut st, true).unwrap();
        for c in 0..3 {
            for v in y.narrow_channels(c, 1).unwrap().data() {
                assert!((v - st.shift[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn batchnorm_output_statistics() {
        let mut r = rng(6);
        let x = Tensor::randn(Shape::new(4, 3, 5, 5), 2.0, &mut r).map(|v| v + 3.0);
        let mut st = BatchNormState::new(3);
        st.scale = vec![0.5, 1.5, 2.0];
        st.shift = vec![-1.0, 0.0, 4.0];
        let y = batchnorm(&x, &mut st, true).unwrap();
        let (mean, var) = channel_stats(&y);
        for c in 0..3 {
            assert!((mean[c] - st.shift[c]).abs() < 1e-3);
            assert!((var[c].sqrt() - st.scale[c]).abs() < 1e-3);
        }
        // running stats moved towards the batch statistics
        assert!(st.running_mean.iter().all(|&m| m > 0.0));
        assert!(st.running_var.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn batchnorm_inference_uses_running_stats() {
        let mut st = BatchNormState::new(1);
        st.running_mean = vec![2.0];
        st.running_var = vec![4.0 - BN_EPS];
        let x = Tensor::new(Shape::new(1, 1, 1, 2), vec![2.0, 4.0]).unwrap();
        let y = batchnorm(&x, &mut st, false).unwrap();
        assert!((y.data()[0]).abs() < 1e-6 && (y.data()[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn elementwise_ops() {
        let x = Tensor::new(Shape::new(1, 1, 1, 3), vec![-0.3, 0.0, 2.1]).unwrap();
        assert_eq!(sign(&x).data(), &[-1.0, 1.0, 1.0]);
        let r = Tensor::new(Shape::new(1, 1, 1, 2), vec![-1.0, 2.0]).unwrap();
        assert_eq!(relu(&r).data(), &[0.0, 2.0]);
        assert!(add(&x, &r).is_err());
    }

    #[test]
    fn concat_shapes_and_slices() {
        let mut g = rng(7);
        let a = Tensor::randn(Shape::new(1, 2, 4, 4), 1.0, &mut g);
        let b = Tensor::randn(Shape::new(1, 3, 4, 4), 1.0, &mut g);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), Shape::new(1, 5, 4, 4));
        let parts = split_channels(&c, &[2, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        let bad = Tensor::zeros(Shape::new(1, 1, 4, 5));
        assert!(concat_channels(&[&a, &bad]).is_err());
    }

    #[test]
    fn pad_then_crop() {
        let x = Tensor::randn(Shape::new(2, 2, 3, 4), 1.0, &mut rng(8));
        let p = pad_const(&x, 2, 1.0);
        assert_eq!(p.shape(), Shape::new(2, 2, 7, 8));
        assert_eq!(p.at(1, 1, 0, 0), 1.0);
        assert_eq!(crop(&p, 2), x);
    }

    fn small_tensor(c: usize) -> impl Strategy<Value = Tensor> {
        (1usize..3, 1usize..4, 1usize..4).prop_flat_map(move |(n, h, w)| {
            prop::collection::vec(-4.0f32..4.0, n * c * 2 * h * 2 * w)
                .prop_map(move |d| Tensor::new(Shape::new(n, c, 2 * h, 2 * w), d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn conv_is_linear(seed in 0u64..1000, a in -2.0f32..2.0, b in -2.0f32..2.0) {
            let mut r = rng(seed);
            let s = Shape::new(2, 3, 6, 6);
            let x = Tensor::randn(s, 1.0, &mut r);
            let y = Tensor::randn(s, 1.0, &mut r);
            let p = ConvParams::new(3, 4, 3, 1, 1);
            let w = Tensor::randn(p.weight_shape(), 1.0, &mut r);
            let mixed = x.zip_map(&y, |u, v| a * u + b * v).unwrap();
            let lhs = conv2d(&mixed, &w, &p).unwrap();
            let rhs = conv2d(&x, &w, &p).unwrap().zip_map(&conv2d(&y, &w, &p).unwrap(), |u, v| a * u + b * v).unwrap();
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((l - r).abs() <= 1e-5 * (1.0 + r.abs()) * 10.0);
            }
        }

        #[test]
        fn maxpool_dominates_avgpool(x in small_tensor(2)) {
            let m = maxpool2(&x).unwrap();
            let a = avgpool2(&x).unwrap();
            prop_assert!(m.data().iter().zip(a.data()).all(|(m, a)| m >= a));
        }

        #[test]
        fn concat_split_roundtrip(a in small_tensor(1), extra in 1usize..4) {
            let b = Tensor::from_fn(a.shape().with_c(extra), |n, c, h, w| (n + c * 7 + h * 3 + w) as f32 * 0.25);
            let c = concat_channels(&[&a, &b]).unwrap();
            let parts = split_channels(&c, &[1, extra]).unwrap();
            prop_assert_eq!(&parts[0], &a);
            prop_assert_eq!(&parts[1], &b);
        }
    }
}
