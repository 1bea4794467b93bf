//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The optimization pipeline needs exact gradients of the attack objective
//! with respect to patch pixels, flowing backwards through the detector's
//! convolutions, alpha compositing, and bilinear resampling. This module
//! provides a small tape: a [`Graph`] records every operation in creation
//! order, [`Graph::backward`] replays them in reverse.
//!
//! Only pixel values and network weights are differentiated. Geometric
//! sampling coordinates, masks, and transform parameters are constants of
//! each recorded graph, which keeps every op's backward rule simple and
//! deterministic (fixed loop order, no atomics).
//!
//! Each op's backward rule is checked against central finite differences in
//! the tests at the bottom of this file.

use crate::error::{ensure_arg, Result};

/// Handle to a tensor node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct T(usize);

/// One bilinear sampling tap: up to four source indices with weights.
/// `idx[i] == u32::MAX` marks a corner that falls outside the source
/// (contributes zero, receives no gradient).
#[derive(Debug, Clone)]
pub struct Tap4 {
    pub idx: [u32; 4],
    pub w: [f64; 4],
}

impl Tap4 {
    pub const OUTSIDE: u32 = u32::MAX;

    pub fn zero() -> Self {
        Tap4 { idx: [Self::OUTSIDE; 4], w: [0.0; 4] }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(T, T),
    Sub(T, T),
    Mul(T, T),
    AddScalar(T),
    MulScalar(T, f64),
    /// Sum of several same-shaped tensors.
    AddN(Vec<T>),
    Clamp01(T),
    LeakyRelu(T, f64),
    Sigmoid(T),
    /// Single element as a scalar node.
    GatherScalar(T, usize),
    /// One channel of a `[C, H, W]` tensor as an `[H, W]` map.
    SliceChannel {
        src: T,
        channel: usize,
        plane: usize,
    },
    Sum(T),
    Conv2d {
        x: T,
        w: T,
        b: T,
        stride: usize,
        pad: usize,
    },
    /// Channel-shared spatial permutation/duplication by index (wrap crops,
    /// integer shifts). `idx[s]` is the source spatial index of output `s`.
    GatherIdx {
        src: T,
        idx: Vec<u32>,
        out_h: usize,
        out_w: usize,
    },
    /// Channel-shared bilinear resampling; one tap per output pixel.
    BilinearGather {
        src: T,
        taps: Vec<Tap4>,
        out_h: usize,
        out_w: usize,
    },
    /// Alpha compositing of `fg` over `bg` with constant per-pixel alpha,
    /// `fg`'s top-left corner at `(x0, y0)` in `bg` coordinates (clipped).
    CompositeOver {
        bg: T,
        fg: T,
        alpha: Vec<f64>,
        x0: i64,
        y0: i64,
    },
    /// Mean over pixels, summed over channels, of sqrt(dx^2 + dy^2 + eps).
    TvLoss { x: T, eps: f64 },
    /// Mean over kept pixels of the distance to the nearest palette color.
    /// `argmin` and `dist` are filled during the forward pass.
    NpsLoss {
        x: T,
        palette: Vec<[f64; 3]>,
        kept: Vec<u32>,
        argmin: Vec<u32>,
        dist: Vec<f64>,
    },
    /// Sum of weighted binary cross-entropies on logits.
    BceWithLogits {
        x: T,
        target: Vec<f64>,
        weight: Vec<f64>,
    },
    /// Sum of masked smooth-L1 terms.
    MaskedSmoothL1 {
        x: T,
        target: Vec<f64>,
        mask: Vec<f64>,
    },
    /// Masked two-class cross entropy on a pair of logit maps;
    /// `target[i] = 1` selects class `a`.
    Ce2 {
        a: T,
        b: T,
        target: Vec<f64>,
        mask: Vec<f64>,
    },
}

struct Node {
    data: Vec<f64>,
    grad: Vec<f64>,
    dims: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

/// A recorded computation. Create leaves with [`constant`](Graph::constant)
/// or [`param`](Graph::param), build ops, then call
/// [`backward`](Graph::backward) on a scalar node.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn numel(dims: &[usize]) -> usize {
    dims.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, data: Vec<f64>, dims: Vec<usize>, requires_grad: bool, op: Op) -> T {
        debug_assert_eq!(data.len(), numel(&dims));
        let grad = if requires_grad { vec![0.0; data.len()] } else { Vec::new() };
        self.nodes.push(Node { data, grad, dims, requires_grad, op });
        T(self.nodes.len() - 1)
    }

    fn needs(&self, t: T) -> bool {
        self.nodes[t.0].requires_grad
    }

    pub fn data(&self, t: T) -> &[f64] {
        &self.nodes[t.0].data
    }

    pub fn grad(&self, t: T) -> &[f64] {
        &self.nodes[t.0].grad
    }

    pub fn dims(&self, t: T) -> &[usize] {
        &self.nodes[t.0].dims
    }

    pub fn scalar(&self, t: T) -> f64 {
        debug_assert_eq!(self.nodes[t.0].data.len(), 1);
        self.nodes[t.0].data[0]
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, data: Vec<f64>, dims: &[usize]) -> T {
        self.push(data, dims.to_vec(), false, Op::Leaf)
    }

    pub fn scalar_const(&mut self, v: f64) -> T {
        self.constant(vec![v], &[1])
    }

    /// Leaf that accumulates gradient.
    pub fn param(&mut self, data: Vec<f64>, dims: &[usize]) -> T {
        self.push(data, dims.to_vec(), true, Op::Leaf)
    }

    pub fn add(&mut self, a: T, b: T) -> T {
        assert_eq!(self.dims(a), self.dims(b), "add: shape mismatch");
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.needs(a) || self.needs(b);
        let dims = self.nodes[a.0].dims.clone();
        self.push(data, dims, rg, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: T, b: T) -> T {
        assert_eq!(self.dims(a), self.dims(b), "sub: shape mismatch");
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.needs(a) || self.needs(b);
        let dims = self.nodes[a.0].dims.clone();
        self.push(data, dims, rg, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: T, b: T) -> T {
        assert_eq!(self.dims(a), self.dims(b), "mul: shape mismatch");
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.needs(a) || self.needs(b);
        let dims = self.nodes[a.0].dims.clone();
        self.push(data, dims, rg, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: T, s: f64) -> T {
        let data = self.nodes[a.0].data.iter().map(|x| x + s).collect();
        let rg = self.needs(a);
        let dims = self.nodes[a.0].dims.clone();
        self.push(data, dims, rg, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: T, s: f64) -> T {
        let data = self.nodes[a.0].data.iter().map(|x| x * s).collect();
        let rg = self.needs(a);
        let dims = self.nodes[a.0].dims.clone();
        self.push(data, dims, rg, Op::MulScalar(a, s))
    }

    pub fn add_n(&mut self, ts: &[T]) -> T {
        assert!(!ts.is_empty());
        let dims = self.nodes[ts[0].0].dims.clone();
        let mut data = vec![0.0; numel(&dims)];
        let mut rg = false;
        for &t in ts {
            assert_eq!(self.dims(t), &dims[..], "add_n: shape mismatch");
            rg |= self.needs(t);
            for (o, v) in data.iter_mut().zip(&self.nodes[t.0].data) {
                *o += v;
            }
        }
        self.push(data, dims, rg, Op::AddN(ts.to_vec()))
    }

    /// Clamp to `[0, 1]`; gradient passes only strictly inside the interval.
    pub fn clamp01(&mut self, a: T) -> T {
        let data = self.nodes[a.0].data.iter().map(|x| x.clamp(0.0, 1.0)).collect();
        let rg = self.needs(a);
        let dims = self.nodes[a.0].dims.clone();
        self.push(data, dims, rg, Op::Clamp01(a))
    }

    pub fn leaky_relu(&mut self, a: T, slope: f64) -> T {
        let data = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| if x >= 0.0 { x } else { slope * x })
            .collect();
        let rg = self.needs(a);
        let dims = self.nodes[a.0].dims.clone();
        self.push(data, dims, rg, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: T) -> T {
        let data = self.nodes[a.0].data.iter().map(|&x| sigmoid(x)).collect();
        let rg = self.needs(a);
        let dims = self.nodes[a.0].dims.clone();
        self.push(data, dims, rg, Op::Sigmoid(a))
    }

    pub fn gather_scalar(&mut self, a: T, index: usize) -> T {
        assert!(index < self.nodes[a.0].data.len());
        let data = vec![self.nodes[a.0].data[index]];
        let rg = self.needs(a);
        self.push(data, vec![1], rg, Op::GatherScalar(a, index))
    }

    pub fn slice_channel(&mut self, src: T, channel: usize) -> T {
        let dims = self.nodes[src.0].dims.clone();
        assert_eq!(dims.len(), 3, "slice_channel expects [C, H, W]");
        let (h, w) = (dims[1], dims[2]);
        let plane = h * w;
        assert!(channel < dims[0]);
        let data = self.nodes[src.0].data[channel * plane..(channel + 1) * plane].to_vec();
        let rg = self.needs(src);
        self.push(data, vec![h, w], rg, Op::SliceChannel { src, channel, plane })
    }

    pub fn sum(&mut self, a: T) -> T {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.needs(a);
        self.push(vec![s], vec![1], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: T) -> T {
        let n = self.nodes[a.0].data.len() as f64;
        let s = self.sum(a);
        self.mul_scalar(s, 1.0 / n)
    }

    /// 2-D convolution: `x` is `[C, H, W]`, `w` is `[O, C, K, K]`, `b` is `[O]`.
    pub fn conv2d(&mut self, x: T, w: T, b: T, stride: usize, pad: usize) -> T {
        let xd = self.nodes[x.0].dims.clone();
        let wd = self.nodes[w.0].dims.clone();
        assert_eq!(xd.len(), 3);
        assert_eq!(wd.len(), 4);
        assert_eq!(xd[0], wd[1], "conv2d: channel mismatch");
        assert_eq!(wd[2], wd[3], "conv2d: square kernels only");
        let (c_in, h, wi) = (xd[0], xd[1], xd[2]);
        let (c_out, k) = (wd[0], wd[2]);
        assert_eq!(self.nodes[b.0].data.len(), c_out);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wi + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; c_out * oh * ow];
        conv2d_forward(
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            &self.nodes[b.0].data,
            &mut out,
            c_in,
            h,
            wi,
            c_out,
            k,
            stride,
            pad,
            oh,
            ow,
        );
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out, vec![c_out, oh, ow], rg, Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn gather_idx(&mut self, src: T, idx: Vec<u32>, out_h: usize, out_w: usize) -> T {
        let dims = self.nodes[src.0].dims.clone();
        assert_eq!(dims.len(), 3);
        assert_eq!(idx.len(), out_h * out_w);
        let (c, h, w) = (dims[0], dims[1], dims[2]);
        let plane = h * w;
        let out_plane = out_h * out_w;
        let mut out = vec![0.0; c * out_plane];
        for ch in 0..c {
            let src_plane = &self.nodes[src.0].data[ch * plane..(ch + 1) * plane];
            let dst = &mut out[ch * out_plane..(ch + 1) * out_plane];
            for (o, &i) in dst.iter_mut().zip(&idx) {
                *o = src_plane[i as usize];
            }
        }
        let rg = self.needs(src);
        self.push(out, vec![c, out_h, out_w], rg, Op::GatherIdx { src, idx, out_h, out_w })
    }

    pub fn bilinear_gather(&mut self, src: T, taps: Vec<Tap4>, out_h: usize, out_w: usize) -> T {
        let dims = self.nodes[src.0].dims.clone();
        assert_eq!(dims.len(), 3);
        assert_eq!(taps.len(), out_h * out_w);
        let (c, h, w) = (dims[0], dims[1], dims[2]);
        let plane = h * w;
        let out_plane = out_h * out_w;
        let mut out = vec![0.0; c * out_plane];
        for ch in 0..c {
            let src_plane = &self.nodes[src.0].data[ch * plane..(ch + 1) * plane];
            let dst = &mut out[ch * out_plane..(ch + 1) * out_plane];
            for (o, tap) in dst.iter_mut().zip(&taps) {
                let mut acc = 0.0;
                for i in 0..4 {
                    if tap.idx[i] != Tap4::OUTSIDE {
                        acc += tap.w[i] * src_plane[tap.idx[i] as usize];
                    }
                }
                *o = acc;
            }
        }
        let rg = self.needs(src);
        self.push(out, vec![c, out_h, out_w], rg, Op::BilinearGather { src, taps, out_h, out_w })
    }

    /// `out = (1 - alpha) * bg + alpha * fg` over the clipped overlap region;
    /// `alpha` has the foreground's spatial shape.
    pub fn composite_over(&mut self, bg: T, fg: T, alpha: Vec<f64>, x0: i64, y0: i64) -> T {
        let bd = self.nodes[bg.0].dims.clone();
        let fd = self.nodes[fg.0].dims.clone();
        assert_eq!(bd.len(), 3);
        assert_eq!(fd.len(), 3);
        assert_eq!(bd[0], fd[0], "composite: channel mismatch");
        assert_eq!(alpha.len(), fd[1] * fd[2]);
        let mut out = self.nodes[bg.0].data.clone();
        let (c, bh, bw) = (bd[0], bd[1], bd[2]);
        let (fh, fw) = (fd[1], fd[2]);
        let fg_data = &self.nodes[fg.0].data;
        for (fy, fx, by, bx) in overlap_iter(fh, fw, bh, bw, x0, y0) {
            let a = alpha[fy * fw + fx];
            for ch in 0..c {
                let o = ch * bh * bw + by * bw + bx;
                let f = fg_data[ch * fh * fw + fy * fw + fx];
                out[o] += a * (f - out[o]);
            }
        }
        let rg = self.needs(bg) || self.needs(fg);
        self.push(out, bd, rg, Op::CompositeOver { bg, fg, alpha, x0, y0 })
    }

    /// Smoothed anisotropic total variation, per the attack objective:
    /// sum over channels and pixels of `sqrt(dx^2 + dy^2 + eps)`, divided by
    /// the per-channel pixel count.
    pub fn tv_loss(&mut self, x: T, eps: f64) -> T {
        let dims = self.nodes[x.0].dims.clone();
        assert_eq!(dims.len(), 3);
        let (c, h, w) = (dims[0], dims[1], dims[2]);
        let data = &self.nodes[x.0].data;
        let mut total = 0.0;
        for ch in 0..c {
            let p = &data[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                for xx in 0..w {
                    let v = p[y * w + xx];
                    let dx = if xx + 1 < w { p[y * w + xx + 1] - v } else { 0.0 };
                    let dy = if y + 1 < h { p[(y + 1) * w + xx] - v } else { 0.0 };
                    total += (dx * dx + dy * dy + eps).sqrt();
                }
            }
        }
        total /= (h * w) as f64;
        let rg = self.needs(x);
        self.push(vec![total], vec![1], rg, Op::TvLoss { x, eps })
    }

    /// Non-printability score: mean over kept pixels of the Euclidean
    /// distance to the nearest palette color. `kept` lists spatial indices.
    pub fn nps_loss(&mut self, x: T, palette: &[[f64; 3]], kept: Vec<u32>) -> T {
        let dims = self.nodes[x.0].dims.clone();
        assert_eq!(dims.len(), 3);
        assert_eq!(dims[0], 3, "nps_loss expects an RGB tensor");
        assert!(!palette.is_empty());
        if kept.is_empty() {
            return self.scalar_const(0.0);
        }
        let plane = dims[1] * dims[2];
        let data = &self.nodes[x.0].data;
        let mut argmin = vec![0u32; kept.len()];
        let mut dist = vec![0.0; kept.len()];
        let mut total = 0.0;
        for (i, &s) in kept.iter().enumerate() {
            let s = s as usize;
            let rgb = [data[s], data[plane + s], data[2 * plane + s]];
            let mut best = f64::INFINITY;
            let mut best_j = 0;
            for (j, c) in palette.iter().enumerate() {
                let d2 = (rgb[0] - c[0]).powi(2) + (rgb[1] - c[1]).powi(2) + (rgb[2] - c[2]).powi(2);
                if d2 < best {
                    best = d2;
                    best_j = j;
                }
            }
            argmin[i] = best_j as u32;
            dist[i] = best.sqrt();
            total += dist[i];
        }
        total /= kept.len() as f64;
        let rg = self.needs(x);
        self.push(
            vec![total],
            vec![1],
            rg,
            Op::NpsLoss { x, palette: palette.to_vec(), kept, argmin, dist },
        )
    }

    /// Sum of `weight[i] * bce(sigmoid(x[i]), target[i])`, numerically stable.
    pub fn bce_with_logits(&mut self, x: T, target: Vec<f64>, weight: Vec<f64>) -> T {
        let n = self.nodes[x.0].data.len();
        assert_eq!(target.len(), n);
        assert_eq!(weight.len(), n);
        let mut total = 0.0;
        for i in 0..n {
            let z = self.nodes[x.0].data[i];
            // max(z,0) - z*t + ln(1 + exp(-|z|))
            total += weight[i] * (z.max(0.0) - z * target[i] + (-z.abs()).exp().ln_1p());
        }
        let rg = self.needs(x);
        self.push(vec![total], vec![1], rg, Op::BceWithLogits { x, target, weight })
    }

    /// Sum of `mask[i] * smooth_l1(x[i] - target[i])`.
    pub fn masked_smooth_l1(&mut self, x: T, target: Vec<f64>, mask: Vec<f64>) -> T {
        let n = self.nodes[x.0].data.len();
        assert_eq!(target.len(), n);
        assert_eq!(mask.len(), n);
        let mut total = 0.0;
        for i in 0..n {
            if mask[i] == 0.0 {
                continue;
            }
            let d = self.nodes[x.0].data[i] - target[i];
            let t = if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
            total += mask[i] * t;
        }
        let rg = self.needs(x);
        self.push(vec![total], vec![1], rg, Op::MaskedSmoothL1 { x, target, mask })
    }

    /// Masked two-class cross-entropy on logit maps `a`, `b`;
    /// `target[i] = 1` means class `a` is correct.
    pub fn ce2(&mut self, a: T, b: T, target: Vec<f64>, mask: Vec<f64>) -> T {
        let n = self.nodes[a.0].data.len();
        assert_eq!(self.nodes[b.0].data.len(), n);
        assert_eq!(target.len(), n);
        assert_eq!(mask.len(), n);
        let mut total = 0.0;
        for i in 0..n {
            if mask[i] == 0.0 {
                continue;
            }
            let z = self.nodes[a.0].data[i] - self.nodes[b.0].data[i];
            total += mask[i] * (z.max(0.0) - z * target[i] + (-z.abs()).exp().ln_1p());
        }
        let rg = self.needs(a) || self.needs(b);
        self.push(vec![total], vec![1], rg, Op::Ce2 { a, b, target, mask })
    }

    /// Backpropagate from a scalar node, accumulating into every
    /// gradient-tracking node reachable from it.
    pub fn backward(&mut self, loss: T) -> Result<()> {
        ensure_arg!(self.nodes[loss.0].data.len() == 1, "backward requires a scalar loss");
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad[0] = 1.0;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            // Split borrows: take the node's grad, apply its rule.
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if node.grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            backward_one(node, before);
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Iterate the overlap of an `fh x fw` foreground placed at `(x0, y0)` in a
/// `bh x bw` background, yielding `(fy, fx, by, bx)`.
fn overlap_iter(
    fh: usize,
    fw: usize,
    bh: usize,
    bw: usize,
    x0: i64,
    y0: i64,
) -> impl Iterator<Item = (usize, usize, usize, usize)> {
    let fy0 = (-y0).max(0) as usize;
    let fx0 = (-x0).max(0) as usize;
    let fy1 = ((bh as i64 - y0).clamp(0, fh as i64)) as usize;
    let fx1 = ((bw as i64 - x0).clamp(0, fw as i64)) as usize;
    (fy0..fy1).flat_map(move |fy| {
        (fx0..fx1).map(move |fx| {
            let by = (fy as i64 + y0) as usize;
            let bx = (fx as i64 + x0) as usize;
            (fy, fx, by, bx)
        })
    })
}

/// Valid output-column window `[lo, hi)` and the input start column for a
/// kernel column offset: `ix = ox * stride + kx_off` must land in `[0, wi)`.
#[inline]
fn col_window(ow: usize, wi: usize, stride: usize, kx_off: i64) -> (usize, usize, usize) {
    let lo = if kx_off < 0 { ((-kx_off) as usize).div_ceil(stride) } else { 0 };
    let hi_i = (wi as i64 - 1 - kx_off).div_euclid(stride as i64) + 1;
    let hi = hi_i.clamp(0, ow as i64) as usize;
    let x_start = (lo as i64 * stride as i64 + kx_off).max(0) as usize;
    (lo, hi.max(lo), x_start)
}

/// De-interleaved copy of an image plane set for strided convolution: for
/// each channel row, the elements of each residue class modulo `stride` are
/// stored contiguously, so the inner convolution loops become contiguous
/// slice zips.
struct PhaseSplit {
    data: Vec<f64>,
    phase_len: usize,
    row_stride: usize,
    plane_stride: usize,
    stride: usize,
}

impl PhaseSplit {
    fn build(x: &[f64], c_in: usize, h: usize, wi: usize, stride: usize) -> PhaseSplit {
        let phase_len = wi.div_ceil(stride);
        let row_stride = phase_len * stride;
        let plane_stride = row_stride * h;
        let mut data = vec![0.0; plane_stride * c_in];
        for c in 0..c_in {
            for iy in 0..h {
                let src = &x[(c * h + iy) * wi..(c * h + iy + 1) * wi];
                let dst = &mut data[c * plane_stride + iy * row_stride..];
                for phase in 0..stride {
                    for (j, v) in src.iter().skip(phase).step_by(stride).enumerate() {
                        dst[phase * phase_len + j] = *v;
                    }
                }
            }
        }
        PhaseSplit { data, phase_len, row_stride, plane_stride, stride }
    }

    /// Contiguous run of `x[c, iy, x_start..].step_by(stride)`, at least
    /// `len` elements.
    #[inline]
    fn row(&self, c: usize, iy: usize, x_start: usize, len: usize) -> &[f64] {
        let phase = x_start % self.stride;
        let off = x_start / self.stride;
        let base = c * self.plane_stride + iy * self.row_stride + phase * self.phase_len + off;
        &self.data[base..base + len]
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    out: &mut [f64],
    c_in: usize,
    h: usize,
    wi: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let phases = PhaseSplit::build(x, c_in, h, wi, stride);
    for o in 0..c_out {
        let out_plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        out_plane.fill(b[o]);
        for c in 0..c_in {
            let w_base = ((o * c_in) + c) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[w_base + ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let kx_off = kx as i64 - pad as i64;
                    let (lo, hi, x_start) = col_window(ow, wi, stride, kx_off);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as i64 - pad as i64;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        let x_row = phases.row(c, iy as usize, x_start, hi - lo);
                        let o_row = &mut out_plane[oy * ow + lo..oy * ow + hi];
                        for (acc, xv) in o_row.iter_mut().zip(x_row) {
                            *acc += wv * xv;
                        }
                    }
                }
            }
        }
    }
}

/// Apply the backward rule of `node`, accumulating into parents (all parents
/// have smaller indices, so they live in `before`).
fn backward_one(node: &mut Node, before: &mut [Node]) {
    let g = std::mem::take(&mut node.grad);
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(before, *a, &g, |gi, _| gi);
            accumulate(before, *b, &g, |gi, _| gi);
        }
        Op::Sub(a, b) => {
            accumulate(before, *a, &g, |gi, _| gi);
            accumulate(before, *b, &g, |gi, _| -gi);
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            if before[a.0].requires_grad {
                let bv: Vec<f64> = before[b.0].data.clone();
                for (i, gi) in g.iter().enumerate() {
                    before[a.0].grad[i] += gi * bv[i];
                }
            }
            if before[b.0].requires_grad {
                let av: Vec<f64> = before[a.0].data.clone();
                for (i, gi) in g.iter().enumerate() {
                    before[b.0].grad[i] += gi * av[i];
                }
            }
        }
        Op::AddScalar(a) => accumulate(before, *a, &g, |gi, _| gi),
        Op::MulScalar(a, s) => {
            let s = *s;
            accumulate(before, *a, &g, move |gi, _| gi * s);
        }
        Op::AddN(ts) => {
            for &t in ts {
                accumulate(before, t, &g, |gi, _| gi);
            }
        }
        Op::Clamp01(a) => {
            let a = *a;
            if before[a.0].requires_grad {
                for (i, gi) in g.iter().enumerate() {
                    let x = before[a.0].data[i];
                    if x > 0.0 && x < 1.0 {
                        before[a.0].grad[i] += gi;
                    }
                }
            }
        }
        Op::LeakyRelu(a, slope) => {
            let (a, slope) = (*a, *slope);
            if before[a.0].requires_grad {
                for (i, gi) in g.iter().enumerate() {
                    let x = before[a.0].data[i];
                    before[a.0].grad[i] += if x >= 0.0 { *gi } else { gi * slope };
                }
            }
        }
        Op::Sigmoid(a) => {
            let a = *a;
            if before[a.0].requires_grad {
                for (i, gi) in g.iter().enumerate() {
                    let y = node.data[i];
                    before[a.0].grad[i] += gi * y * (1.0 - y);
                }
            }
        }
        Op::GatherScalar(a, idx) => {
            let (a, idx) = (*a, *idx);
            if before[a.0].requires_grad {
                before[a.0].grad[idx] += g[0];
            }
        }
        Op::SliceChannel { src, channel, plane } => {
            let (src, channel, plane) = (*src, *channel, *plane);
            if before[src.0].requires_grad {
                let dst = &mut before[src.0].grad[channel * plane..(channel + 1) * plane];
                for (d, gi) in dst.iter_mut().zip(&g) {
                    *d += gi;
                }
            }
        }
        Op::Sum(a) => {
            let a = *a;
            if before[a.0].requires_grad {
                for d in before[a.0].grad.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            conv2d_backward(before, *x, *w, *b, *stride, *pad, &node.dims, &g);
        }
        Op::GatherIdx { src, idx, out_h, out_w } => {
            let src = *src;
            if before[src.0].requires_grad {
                let dims = before[src.0].dims.clone();
                let (c, h, w) = (dims[0], dims[1], dims[2]);
                let plane = h * w;
                let out_plane = out_h * out_w;
                for ch in 0..c {
                    let gp = &g[ch * out_plane..(ch + 1) * out_plane];
                    let dst = &mut before[src.0].grad[ch * plane..(ch + 1) * plane];
                    for (gi, &i) in gp.iter().zip(idx) {
                        dst[i as usize] += gi;
                    }
                }
            }
        }
        Op::BilinearGather { src, taps, out_h, out_w } => {
            let src = *src;
            if before[src.0].requires_grad {
                let dims = before[src.0].dims.clone();
                let (c, h, w) = (dims[0], dims[1], dims[2]);
                let plane = h * w;
                let out_plane = out_h * out_w;
                for ch in 0..c {
                    let gp = &g[ch * out_plane..(ch + 1) * out_plane];
                    let dst = &mut before[src.0].grad[ch * plane..(ch + 1) * plane];
                    for (gi, tap) in gp.iter().zip(taps) {
                        for i in 0..4 {
                            if tap.idx[i] != Tap4::OUTSIDE {
                                dst[tap.idx[i] as usize] += gi * tap.w[i];
                            }
                        }
                    }
                }
            }
        }
        Op::CompositeOver { bg, fg, alpha, x0, y0 } => {
            let (bg, fg) = (*bg, *fg);
            let bd = before[bg.0].dims.clone();
            let fd = before[fg.0].dims.clone();
            let (c, bh, bw) = (bd[0], bd[1], bd[2]);
            let (fh, fw) = (fd[1], fd[2]);
            if before[bg.0].requires_grad {
                // Outside the overlap the gradient passes through unchanged.
                for (d, gi) in before[bg.0].grad.iter_mut().zip(&g) {
                    *d += gi;
                }
                for (fy, fx, by, bx) in overlap_iter(fh, fw, bh, bw, *x0, *y0) {
                    let a = alpha[fy * fw + fx];
                    for ch in 0..c {
                        let o = ch * bh * bw + by * bw + bx;
                        before[bg.0].grad[o] -= g[o] * a;
                    }
                }
            }
            if before[fg.0].requires_grad {
                for (fy, fx, by, bx) in overlap_iter(fh, fw, bh, bw, *x0, *y0) {
                    let a = alpha[fy * fw + fx];
                    for ch in 0..c {
                        let o = ch * bh * bw + by * bw + bx;
                        before[fg.0].grad[ch * fh * fw + fy * fw + fx] += g[o] * a;
                    }
                }
            }
        }
        Op::TvLoss { x, eps } => {
            let x = *x;
            if before[x.0].requires_grad {
                let dims = before[x.0].dims.clone();
                let (c, h, w) = (dims[0], dims[1], dims[2]);
                let scale = g[0] / (h * w) as f64;
                for ch in 0..c {
                    let base = ch * h * w;
                    for y in 0..h {
                        for xx in 0..w {
                            let i = base + y * w + xx;
                            let v = before[x.0].data[i];
                            let (dx, ir) = if xx + 1 < w {
                                (before[x.0].data[i + 1] - v, Some(i + 1))
                            } else {
                                (0.0, None)
                            };
                            let (dy, id) = if y + 1 < h {
                                (before[x.0].data[i + w] - v, Some(i + w))
                            } else {
                                (0.0, None)
                            };
                            let t = (dx * dx + dy * dy + eps).sqrt();
                            let inv = scale / t;
                            if let Some(ir) = ir {
                                before[x.0].grad[ir] += dx * inv;
                                before[x.0].grad[i] -= dx * inv;
                            }
                            if let Some(id) = id {
                                before[x.0].grad[id] += dy * inv;
                                before[x.0].grad[i] -= dy * inv;
                            }
                        }
                    }
                }
            }
        }
        Op::NpsLoss { x, palette, kept, argmin, dist } => {
            let x = *x;
            if before[x.0].requires_grad {
                let dims = before[x.0].dims.clone();
                let plane = dims[1] * dims[2];
                let scale = g[0] / kept.len() as f64;
                for (i, &s) in kept.iter().enumerate() {
                    let s = s as usize;
                    if dist[i] == 0.0 {
                        continue;
                    }
                    let c = palette[argmin[i] as usize];
                    let inv = scale / dist[i];
                    for ch in 0..3 {
                        let o = ch * plane + s;
                        before[x.0].grad[o] += (before[x.0].data[o] - c[ch]) * inv;
                    }
                }
            }
        }
        Op::BceWithLogits { x, target, weight } => {
            let x = *x;
            if before[x.0].requires_grad {
                for i in 0..target.len() {
                    let p = sigmoid(before[x.0].data[i]);
                    before[x.0].grad[i] += g[0] * weight[i] * (p - target[i]);
                }
            }
        }
        Op::MaskedSmoothL1 { x, target, mask } => {
            let x = *x;
            if before[x.0].requires_grad {
                for i in 0..target.len() {
                    if mask[i] == 0.0 {
                        continue;
                    }
                    let d = before[x.0].data[i] - target[i];
                    before[x.0].grad[i] += g[0] * mask[i] * d.clamp(-1.0, 1.0);
                }
            }
        }
        Op::Ce2 { a, b, target, mask } => {
            let (a, b) = (*a, *b);
            for i in 0..target.len() {
                if mask[i] == 0.0 {
                    continue;
                }
                let z = before[a.0].data[i] - before[b.0].data[i];
                let d = g[0] * mask[i] * (sigmoid(z) - target[i]);
                if before[a.0].requires_grad {
                    before[a.0].grad[i] += d;
                }
                if before[b.0].requires_grad {
                    before[b.0].grad[i] -= d;
                }
            }
        }
    }
    node.grad = g;
}

fn conv2d_backward(
    before: &mut [Node],
    x: T,
    w: T,
    b: T,
    stride: usize,
    pad: usize,
    out_dims: &[usize],
    g: &[f64],
) {
    let xd = before[x.0].dims.clone();
    let wd = before[w.0].dims.clone();
    let (c_in, h, wi) = (xd[0], xd[1], xd[2]);
    let (c_out, k) = (wd[0], wd[2]);
    let (oh, ow) = (out_dims[1], out_dims[2]);

    if before[b.0].requires_grad {
        for o in 0..c_out {
            let s: f64 = g[o * oh * ow..(o + 1) * oh * ow].iter().sum();
            before[b.0].grad[o] += s;
        }
    }

    if before[w.0].requires_grad {
        let phases = PhaseSplit::build(&before[x.0].data, c_in, h, wi, stride);
        for o in 0..c_out {
            let g_plane = &g[o * oh * ow..(o + 1) * oh * ow];
            for c in 0..c_in {
                let w_base = ((o * c_in) + c) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let kx_off = kx as i64 - pad as i64;
                        let (lo, hi, x_start) = col_window(ow, wi, stride, kx_off);
                        if lo >= hi {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as i64 - pad as i64;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            let x_row = phases.row(c, iy as usize, x_start, hi - lo);
                            let g_row = &g_plane[oy * ow + lo..oy * ow + hi];
                            for (gv, xv) in g_row.iter().zip(x_row) {
                                acc += gv * xv;
                            }
                        }
                        before[w.0].grad[w_base + ky * k + kx] += acc;
                    }
                }
            }
        }
    }

    if before[x.0].requires_grad {
        let w_data: Vec<f64> = before[w.0].data.clone();
        // Accumulate into a phase-split buffer (contiguous writes), then
        // interleave back into the input gradient.
        let phase_len = wi.div_ceil(stride);
        let row_stride = phase_len * stride;
        let plane_stride = row_stride * h;
        let mut phase_grad = vec![0.0; plane_stride * c_in];
        for o in 0..c_out {
            let g_plane = &g[o * oh * ow..(o + 1) * oh * ow];
            for c in 0..c_in {
                let w_base = ((o * c_in) + c) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w_data[w_base + ky * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let kx_off = kx as i64 - pad as i64;
                        let (lo, hi, x_start) = col_window(ow, wi, stride, kx_off);
                        if lo >= hi {
                            continue;
                        }
                        let phase = x_start % stride;
                        let off = x_start / stride;
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as i64 - pad as i64;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            let base = c * plane_stride
                                + iy as usize * row_stride
                                + phase * phase_len
                                + off;
                            let dst = &mut phase_grad[base..base + hi - lo];
                            let g_row = &g_plane[oy * ow + lo..oy * ow + hi];
                            for (xv, gv) in dst.iter_mut().zip(g_row) {
                                *xv += gv * wv;
                            }
                        }
                    }
                }
            }
        }
        let x_grad = &mut before[x.0].grad;
        for c in 0..c_in {
            for iy in 0..h {
                let src = &phase_grad[c * plane_stride + iy * row_stride..];
                let dst = &mut x_grad[(c * h + iy) * wi..(c * h + iy + 1) * wi];
                for phase in 0..stride {
                    for (j, v) in dst.iter_mut().skip(phase).step_by(stride).enumerate() {
                        *v += src[phase * phase_len + j];
                    }
                }
            }
        }
    }
}

fn accumulate(before: &mut [Node], t: T, g: &[f64], f: impl Fn(f64, usize) -> f64) {
    if before[t.0].requires_grad {
        for (i, gi) in g.iter().enumerate() {
            before[t.0].grad[i] += f(*gi, i);
        }
    }
}

/// Build bilinear taps that sample `src` (of size `src_h x src_w`) at the
/// given floating-point coordinates, one per output pixel, in row-major
/// order. Coordinates are in source pixel units; samples outside the source
/// contribute zero.
pub fn bilinear_taps(
    src_h: usize,
    src_w: usize,
    coords: impl Iterator<Item = (f64, f64)>,
) -> Vec<Tap4> {
    coords
        .map(|(x, y)| {
            let x0 = x.floor();
            let y0 = y.floor();
            let fx = x - x0;
            let fy = y - y0;
            let mut tap = Tap4::zero();
            let corners = [
                (x0 as i64, y0 as i64, (1.0 - fx) * (1.0 - fy)),
                (x0 as i64 + 1, y0 as i64, fx * (1.0 - fy)),
                (x0 as i64, y0 as i64 + 1, (1.0 - fx) * fy),
                (x0 as i64 + 1, y0 as i64 + 1, fx * fy),
            ];
            for (i, (cx, cy, w)) in corners.into_iter().enumerate() {
                if cx >= 0 && cy >= 0 && (cx as usize) < src_w && (cy as usize) < src_h {
                    tap.idx[i] = (cy as usize * src_w + cx as usize) as u32;
                    tap.w[i] = w;
                }
            }
            tap
        })
        .collect()
}

/// Apply bilinear taps to a plain (non-recorded) single-channel map.
pub fn apply_taps_plain(src: &[f64], taps: &[Tap4]) -> Vec<f64> {
    taps.iter()
        .map(|tap| {
            let mut acc = 0.0;
            for i in 0..4 {
                if tap.idx[i] != Tap4::OUTSIDE {
                    acc += tap.w[i] * src[tap.idx[i] as usize];
                }
            }
            acc
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite-difference gradient of `f` at `x0`.
    fn fd_grad(mut f: impl FnMut(&[f64]) -> f64, x0: &[f64], h: f64) -> Vec<f64> {
        let mut g = vec![0.0; x0.len()];
        let mut x = x0.to_vec();
        for i in 0..x0.len() {
            x[i] = x0[i] + h;
            let up = f(&x);
            x[i] = x0[i] - h;
            let dn = f(&x);
            x[i] = x0[i];
            g[i] = (up - dn) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let denom = x.abs().max(y.abs()).max(1e-6);
            assert!(
                (x - y).abs() / denom < tol,
                "grad mismatch at {i}: analytic {x} vs fd {y}"
            );
        }
    }

    fn seeded(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
        // splitmix64 based fill; keeps the test free of rand.
        let mut s = seed.wrapping_add(0x9E3779B97F4A7C15);
        (0..n)
            .map(|_| {
                s = s.wrapping_add(0x9E3779B97F4A7C15);
                let mut z = s;
                z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
                z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
                z ^= z >> 31;
                lo + (hi - lo) * (z as f64 / u64::MAX as f64)
            })
            .collect()
    }

    #[test]
    fn elementwise_chain_matches_fd() {
        let x0 = seeded(12, -0.8, 0.8, 1);
        let f = |x: &[f64]| {
            let mut g = Graph::new();
            let p = g.param(x.to_vec(), &[3, 2, 2]);
            let a = g.mul_scalar(p, 1.3);
            let b = g.add_scalar(a, 0.1);
            let c = g.sigmoid(b);
            let d = g.leaky_relu(c, 0.1);
            let e = g.mul(d, c);
            let s = g.sum(e);
            g.scalar(s)
        };
        let mut g = Graph::new();
        let p = g.param(x0.clone(), &[3, 2, 2]);
        let a = g.mul_scalar(p, 1.3);
        let b = g.add_scalar(a, 0.1);
        let c = g.sigmoid(b);
        let d = g.leaky_relu(c, 0.1);
        let e = g.mul(d, c);
        let s = g.sum(e);
        g.backward(s).unwrap();
        assert_close(g.grad(p), &fd_grad(f, &x0, 1e-6), 1e-7);
    }

    #[test]
    fn conv2d_matches_fd_for_input_weights_and_bias() {
        let x0 = seeded(3 * 6 * 6, -1.0, 1.0, 2);
        let w0 = seeded(4 * 3 * 3 * 3, -0.5, 0.5, 3);
        let b0 = seeded(4, -0.2, 0.2, 4);
        let run = |x: &[f64], w: &[f64], b: &[f64]| {
            let mut g = Graph::new();
            let xp = g.param(x.to_vec(), &[3, 6, 6]);
            let wp = g.param(w.to_vec(), &[4, 3, 3, 3]);
            let bp = g.param(b.to_vec(), &[4]);
            let y = g.conv2d(xp, wp, bp, 2, 1);
            let y2 = g.mul(y, y);
            let s = g.sum(y2);
            (g, xp, wp, bp, s)
        };
        let (mut g, xp, wp, bp, s) = run(&x0, &w0, &b0);
        g.backward(s).unwrap();

        let fx = fd_grad(|x| { let (g, _, _, _, s) = run(x, &w0, &b0); g.scalar(s) }, &x0, 1e-6);
        let fw = fd_grad(|w| { let (g, _, _, _, s) = run(&x0, w, &b0); g.scalar(s) }, &w0, 1e-6);
        let fb = fd_grad(|b| { let (g, _, _, _, s) = run(&x0, &w0, b); g.scalar(s) }, &b0, 1e-6);
        assert_close(g.grad(xp), &fx, 1e-6);
        assert_close(g.grad(wp), &fw, 1e-6);
        assert_close(g.grad(bp), &fb, 1e-6);
    }

    #[test]
    fn gather_and_composite_match_fd() {
        let fgv = seeded(3 * 4 * 4, 0.1, 0.9, 5);
        let bgv = seeded(3 * 6 * 6, 0.1, 0.9, 6);
        let alpha = seeded(16, 0.0, 1.0, 7);
        let taps = bilinear_taps(4, 4, (0..16).map(|i| {
            let y = (i / 4) as f64 * 0.8 + 0.1;
            let x = (i % 4) as f64 * 0.8 - 0.3;
            (x, y)
        }));
        let run = |fg: &[f64], bg: &[f64]| {
            let mut g = Graph::new();
            let fgp = g.param(fg.to_vec(), &[3, 4, 4]);
            let bgp = g.param(bg.to_vec(), &[3, 6, 6]);
            let warped = g.bilinear_gather(fgp, taps.clone(), 4, 4);
            let out = g.composite_over(bgp, warped, alpha.clone(), -1, 2);
            let sq = g.mul(out, out);
            let s = g.sum(sq);
            (g, fgp, bgp, s)
        };
        let (mut g, fgp, bgp, s) = run(&fgv, &bgv);
        g.backward(s).unwrap();
        let ff = fd_grad(|f| { let (g, _, _, s) = run(f, &bgv); g.scalar(s) }, &fgv, 1e-6);
        let fb = fd_grad(|b| { let (g, _, _, s) = run(&fgv, b); g.scalar(s) }, &bgv, 1e-6);
        assert_close(g.grad(fgp), &ff, 1e-6);
        assert_close(g.grad(bgp), &fb, 1e-6);
    }

    #[test]
    fn loss_ops_match_fd() {
        let x0 = seeded(3 * 4 * 4, 0.05, 0.95, 8);
        let palette = vec![[0.0, 0.0, 0.0], [1.0, 0.2, 0.2], [0.5, 0.5, 0.9]];
        let kept: Vec<u32> = (0..16).filter(|i| i % 3 != 0).collect();
        let run = |x: &[f64]| {
            let mut g = Graph::new();
            let p = g.param(x.to_vec(), &[3, 4, 4]);
            let tv = g.tv_loss(p, 1e-8);
            let nps = g.nps_loss(p, &palette, kept.clone());
            let w = g.mul_scalar(nps, 0.3);
            let tot = g.add(tv, w);
            (g, p, tot)
        };
        let (mut g, p, tot) = run(&x0);
        g.backward(tot).unwrap();
        let fd = fd_grad(|x| { let (g, _, t) = run(x); g.scalar(t) }, &x0, 1e-6);
        assert_close(g.grad(p), &fd, 1e-5);
    }

    #[test]
    fn training_loss_ops_match_fd() {
        let n = 10;
        let x0 = seeded(n, -2.0, 2.0, 9);
        let y0 = seeded(n, -2.0, 2.0, 10);
        let target: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let boxt = seeded(n, -1.5, 1.5, 11);
        let mask: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let weight = vec![0.7; n];
        let run = |x: &[f64], y: &[f64]| {
            let mut g = Graph::new();
            let xp = g.param(x.to_vec(), &[n]);
            let yp = g.param(y.to_vec(), &[n]);
            let bce = g.bce_with_logits(xp, target.clone(), weight.clone());
            let sl1 = g.masked_smooth_l1(xp, boxt.clone(), mask.clone());
            let ce = g.ce2(xp, yp, target.clone(), mask.clone());
            let a = g.add(bce, sl1);
            let tot = g.add(a, ce);
            (g, xp, yp, tot)
        };
        let (mut g, xp, yp, tot) = run(&x0, &y0);
        g.backward(tot).unwrap();
        let fx = fd_grad(|x| { let (g, _, _, t) = run(x, &y0); g.scalar(t) }, &x0, 1e-6);
        let fy = fd_grad(|y| { let (g, _, _, t) = run(&x0, y); g.scalar(t) }, &y0, 1e-6);
        assert_close(g.grad(xp), &fx, 1e-6);
        assert_close(g.grad(yp), &fy, 1e-6);
    }

    #[test]
    fn gather_idx_and_slice_match_fd() {
        let x0 = seeded(2 * 3 * 3, -1.0, 1.0, 12);
        let idx: Vec<u32> = vec![4, 4, 0, 8, 2, 6];
        let run = |x: &[f64]| {
            let mut g = Graph::new();
            let p = g.param(x.to_vec(), &[2, 3, 3]);
            let gathered = g.gather_idx(p, idx.clone(), 2, 3);
            let ch = g.slice_channel(gathered, 1);
            let e = g.mul(ch, ch);
            let s = g.sum(e);
            (g, p, s)
        };
        let (mut g, p, s) = run(&x0);
        g.backward(s).unwrap();
        let fd = fd_grad(|x| { let (g, _, s) = run(x); g.scalar(s) }, &x0, 1e-6);
        assert_close(g.grad(p), &fd, 1e-7);
    }

    #[test]
    fn clamp_blocks_gradient_outside_interval() {
        let mut g = Graph::new();
        let p = g.param(vec![-0.5, 0.5, 1.5], &[3]);
        let c = g.clamp01(p);
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(p), &[0.0, 1.0, 0.0]);
    }
}
