//! Eager tensor kernels and their vector-Jacobian products.
//!
//! Activations are N×C×H×W. Reductions accumulate in `f64` and store `f32`.
//! The tape in [`crate::tape`] records these kernels; they are also usable
//! directly for tape-free evaluation.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding that keeps `H' = ceil(H / stride)`.
    Same,
    /// No padding.
    Valid,
}

/// Resolved geometry of one conv2d call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn resolve(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let mismatch = || {
            Error::contract(
                "conv2d",
                format!("input shape {input:?} is incompatible with kernel shape {kernel:?}"),
            )
        };
        let (&[n, cin, h, w], &[cout, kcin, kh, kw]) = (input, kernel) else {
            return Err(mismatch());
        };
        if kcin != cin {
            return Err(mismatch());
        }
        if stride == 0 {
            return Err(Error::contract("conv2d", "stride must be positive"));
        }
        let (pad_h, pad_w) = match padding {
            Padding::Same => (kh - 1, kw - 1),
            Padding::Valid => (0, 0),
        };
        if kh > h + pad_h || kw > w + pad_w {
            return Err(Error::contract(
                "conv2d",
                format!(
                    "kernel {kh}×{kw} exceeds padded input {}×{} (input {input:?}, kernel {kernel:?})",
                    h + pad_h,
                    w + pad_w
                ),
            ));
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
            out_h: (h + pad_h - kh) / stride + 1,
            out_w: (w + pad_w - kw) / stride + 1,
        })
    }

    /// Output positions `o` along one axis whose input index `o*stride + k - pad` is in `0..len`.
    fn valid_range(
        out_len: usize,
        len: usize,
        k: usize,
        pad: usize,
        stride: usize,
    ) -> (usize, usize) {
        // o*s + k >= pad  and  o*s + k < len + pad
        let lo = pad.saturating_sub(k).div_ceil(stride);
        let hi = if len + pad > k {
            (len + pad - k).div_ceil(stride).min(out_len)
        } else {
            0
        };
        if lo < hi {
            (lo, hi)
        } else {
            (0, 0)
        }
    }

    fn rows(&self, ky: usize) -> (usize, usize) {
        Self::valid_range(self.out_h, self.h, ky, self.pad_top, self.stride)
    }

    fn cols(&self, kx: usize) -> (usize, usize) {
        Self::valid_range(self.out_w, self.w, kx, self.pad_left, self.stride)
    }
}

/// 2-D cross-correlation with optional bias. No kernel flip.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor, ConvGeometry)> {
    let g = ConvGeometry::resolve(input.shape(), kernel.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::contract(
                "conv2d",
                format!(
                    "bias shape {:?} does not match {} output channels",
                    b.shape(),
                    g.cout
                ),
            ));
        }
    }
    let x = input.data();
    let k = kernel.data();
    let plane = g.out_h * g.out_w;
    let mut out = vec![0f32; g.n * g.cout * plane];
    par::for_each_chunk_mut(&mut out, plane, |idx, dst| {
        let (n, co) = (idx / g.cout, idx % g.cout);
        let b0 = bias.map_or(0.0, |b| b.data()[co] as f64);
        let mut acc = vec![b0; plane];
        for ci in 0..g.cin {
            let src = &x[(n * g.cin + ci) * g.h * g.w..][..g.h * g.w];
            for ky in 0..g.kh {
                let (oy0, oy1) = g.rows(ky);
                for kx in 0..g.kw {
                    let kv = k[((co * g.cin + ci) * g.kh + ky) * g.kw + kx] as f64;
                    let (ox0, ox1) = g.cols(kx);
                    if ox0 == ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad_top;
                        let row = &src[iy * g.w..][..g.w];
                        let acc_row = &mut acc[oy * g.out_w..][..g.out_w];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.pad_left;
                            for (a, &v) in acc_row[ox0..ox1].iter_mut().zip(&row[ix0..]) {
                                *a += kv * v as f64;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                acc_row[ox] += kv * row[ox * g.stride + kx - g.pad_left] as f64;
                            }
                        }
                    }
                }
            }
        }
        for (d, a) in dst.iter_mut().zip(acc) {
            *d = a as f32;
        }
    });
    Ok((Tensor::new([g.n, g.cout, g.out_h, g.out_w], out)?, g))
}

/// Gradients of [`conv2d`] with respect to input (when `with_input`), kernel
/// and bias (when `with_bias`).
pub fn conv2d_backward(
    g: &ConvGeometry,
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    with_input: bool,
    with_bias: bool,
) -> (Option<Tensor>, Tensor, Option<Tensor>) {
    let x = input.data();
    let k = kernel.data();
    let go = grad_out.data();
    let oplane = g.out_h * g.out_w;
    let iplane = g.h * g.w;

    let mut gin = vec![0f32; if with_input { g.n * g.cin * iplane } else { 0 }];
    par::for_each_chunk_mut(&mut gin, iplane, |idx, dst| {
        let (n, ci) = (idx / g.cin, idx % g.cin);
        let mut acc = vec![0f64; iplane];
        for co in 0..g.cout {
            let gsrc = &go[(n * g.cout + co) * oplane..][..oplane];
            for ky in 0..g.kh {
                let (oy0, oy1) = g.rows(ky);
                for kx in 0..g.kw {
                    let kv = k[((co * g.cin + ci) * g.kh + ky) * g.kw + kx] as f64;
                    let (ox0, ox1) = g.cols(kx);
                    if ox0 == ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad_top;
                        let grow = &gsrc[oy * g.out_w..][..g.out_w];
                        let arow = &mut acc[iy * g.w..][..g.w];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.pad_left;
                            for (a, &gv) in arow[ix0..].iter_mut().zip(&grow[ox0..ox1]) {
                                *a += kv * gv as f64;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                arow[ox * g.stride + kx - g.pad_left] += kv * grow[ox] as f64;
                            }
                        }
                    }
                }
            }
        }
        for (d, a) in dst.iter_mut().zip(acc) {
            *d = a as f32;
        }
    });

    let kper = g.cin * g.kh * g.kw;
    let mut gk = vec![0f32; g.cout * kper];
    par::for_each_chunk_mut(&mut gk, kper, |co, dst| {
        for ci in 0..g.cin {
            for ky in 0..g.kh {
                let (oy0, oy1) = g.rows(ky);
                for kx in 0..g.kw {
                    let (ox0, ox1) = g.cols(kx);
                    if ox0 == ox1 {
                        continue;
                    }
                    let mut acc = 0f64;
                    for n in 0..g.n {
                        let src = &x[(n * g.cin + ci) * iplane..][..iplane];
                        let gsrc = &go[(n * g.cout + co) * oplane..][..oplane];
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad_top;
                            let row = &src[iy * g.w..][..g.w];
                            let grow = &gsrc[oy * g.out_w..][..g.out_w];
                            if g.stride == 1 {
                                let ix0 = ox0 + kx - g.pad_left;
                                for (&gv, &v) in grow[ox0..ox1].iter().zip(&row[ix0..]) {
                                    acc += gv as f64 * v as f64;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    acc += grow[ox] as f64
                                        * row[ox * g.stride + kx - g.pad_left] as f64;
                                }
                            }
                        }
                    }
                    dst[(ci * g.kh + ky) * g.kw + kx] = acc as f32;
                }
            }
        }
    });

    let gb = with_bias.then(|| {
        let sums = (0..g.cout)
            .map(|co| {
                (0..g.n)
                    .map(|n| {
                        go[(n * g.cout + co) * oplane..][..oplane]
                            .iter()
                            .map(|&v| v as f64)
                            .sum::<f64>()
                    })
                    .sum::<f64>() as f32
            })
            .collect();
        Tensor::new([g.cout], sums).expect("bias grad shape")
    });

    (
        with_input.then(|| Tensor::new([g.n, g.cin, g.h, g.w], gin).expect("input grad shape")),
        Tensor::new(kernel.shape(), gk).expect("kernel grad shape"),
        gb,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolScope {
    /// Sliding `window`×`window` pooling with the given stride, no padding.
    Windowed { window: usize, stride: usize },
    /// Reduce H×W per channel: output N×C×1×1.
    GlobalSpatial,
    /// Reduce C per position: output N×1×H×W.
    GlobalChannel,
}

/// Pooling result. For max pooling, `argmax[i]` is the flat input index
/// that produced output `i` (first occurrence in row-major scan on ties).
#[derive(Clone, Debug)]
pub struct Pooled {
    pub output: Tensor,
    pub argmax: Option<Vec<usize>>,
}

/// Generic reduction over groups of input offsets. `groups` yields, per
/// output element, the input indices it reduces in scan order.
fn reduce_groups(
    x: &[f32],
    mode: PoolMode,
    n_out: usize,
    group: impl Fn(usize, &mut Vec<usize>) + Sync + Send,
) -> (Vec<f32>, Option<Vec<usize>>) {
    let rows = par::map_indices(n_out, |o| {
        let mut idx = Vec::new();
        group(o, &mut idx);
        match mode {
            PoolMode::Avg => {
                let s: f64 = idx.iter().map(|&i| x[i] as f64).sum();
                ((s / idx.len() as f64) as f32, 0)
            }
            PoolMode::Max => {
                let mut best = idx[0];
                for &i in &idx[1..] {
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                (x[best], best)
            }
        }
    });
    let (vals, arg): (Vec<f32>, Vec<usize>) = rows.into_iter().unzip();
    (vals, (mode == PoolMode::Max).then_some(arg))
}

pub fn pool2d(input: &Tensor, mode: PoolMode, scope: PoolScope) -> Result<Pooled> {
    let (n, c, h, w) = input.dims4("pool2d")?;
    let x = input.data();
    let (shape, (vals, argmax)) = match scope {
        PoolScope::Windowed { window, stride } => {
            if window == 0 || stride == 0 || window > h || window > w {
                return Err(Error::contract(
                    "pool2d",
                    format!("window {window} stride {stride} invalid for {h}×{w} input"),
                ));
            }
            let oh = (h - window) / stride + 1;
            let ow = (w - window) / stride + 1;
            let res = reduce_groups(x, mode, n * c * oh * ow, |o, idx| {
                let (plane, rem) = (o / (oh * ow), o % (oh * ow));
                let (oy, ox) = (rem / ow, rem % ow);
                for dy in 0..window {
                    for dx in 0..window {
                        idx.push(plane * h * w + (oy * stride + dy) * w + ox * stride + dx);
                    }
                }
            });
            (vec![n, c, oh, ow], res)
        }
        PoolScope::GlobalSpatial => {
            let res = reduce_groups(x, mode, n * c, |o, idx| {
                idx.extend(o * h * w..(o + 1) * h * w)
            });
            (vec![n, c, 1, 1], res)
        }
        PoolScope::GlobalChannel => {
            let res = reduce_groups(x, mode, n * h * w, |o, idx| {
                let (b, p) = (o / (h * w), o % (h * w));
                idx.extend((0..c).map(|ch| (b * c + ch) * h * w + p));
            });
            (vec![n, 1, h, w], res)
        }
    };
    Ok(Pooled {
        output: Tensor::new(shape, vals)?,
        argmax,
    })
}

pub fn pool2d_backward(
    input_shape: &[usize],
    mode: PoolMode,
    scope: PoolScope,
    argmax: Option<&[usize]>,
    grad_out: &Tensor,
) -> Tensor {
    let (n, c, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let go = grad_out.data();
    let mut gin = vec![0f64; n * c * h * w];
    match (mode, argmax) {
        (PoolMode::Max, Some(arg)) => {
            for (&i, &g) in arg.iter().zip(go) {
                gin[i] += g as f64;
            }
        }
        _ => match scope {
            PoolScope::Windowed { window, stride } => {
                let oh = (h - window) / stride + 1;
                let ow = (w - window) / stride + 1;
                let scale = 1.0 / (window * window) as f64;
                for plane in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = go[(plane * oh + oy) * ow + ox] as f64 * scale;
                            for dy in 0..window {
                                for dx in 0..window {
                                    gin[plane * h * w
                                        + (oy * stride + dy) * w
                                        + ox * stride
                                        + dx] += g;
                                }
                            }
                        }
                    }
                }
            }
            PoolScope::GlobalSpatial => {
                let scale = 1.0 / (h * w) as f64;
                for plane in 0..n * c {
                    let g = go[plane] as f64 * scale;
                    gin[plane * h * w..(plane + 1) * h * w]
                        .iter_mut()
                        .for_each(|v| *v = g);
                }
            }
            PoolScope::GlobalChannel => {
                let scale = 1.0 / c as f64;
                for b in 0..n {
                    for ch in 0..c {
                        for p in 0..h * w {
                            gin[(b * c + ch) * h * w + p] = go[b * h * w + p] as f64 * scale;
                        }
                    }
                }
            }
        },
    }
    Tensor::new(input_shape, gin.into_iter().map(|v| v as f32).collect()).expect("pool grad shape")
}

/// `input[*, K] · weights[K, M] (+ bias[M])`.
pub fn dense(input: &Tensor, weights: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let k = *input.shape().last().expect("rank >= 1");
    let (wk, m) = match weights.shape() {
        &[wk, m] => (wk, m),
        s => {
            return Err(Error::contract(
                "dense",
                format!("weights must be K×M, got {s:?}"),
            ))
        }
    };
    if wk != k {
        return Err(Error::contract(
            "dense",
            format!(
                "input shape {:?} does not match weights shape {:?}",
                input.shape(),
                weights.shape()
            ),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [m] {
            return Err(Error::contract(
                "dense",
                format!("bias shape {:?} should be [{m}]", b.shape()),
            ));
        }
    }
    let rows = input.numel() / k;
    let (x, wt) = (input.data(), weights.data());
    let mut out = vec![0f32; rows * m];
    par::for_each_chunk_mut(&mut out, m, |r, dst| {
        let xr = &x[r * k..][..k];
        for (j, d) in dst.iter_mut().enumerate() {
            let mut acc = bias.map_or(0.0, |b| b.data()[j] as f64);
            for (i, &xv) in xr.iter().enumerate() {
                acc += xv as f64 * wt[i * m + j] as f64;
            }
            *d = acc as f32;
        }
    });
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = m;
    Tensor::new(shape, out)
}

pub fn dense_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    with_bias: bool,
) -> (Tensor, Tensor, Option<Tensor>) {
    let (k, m) = (weights.shape()[0], weights.shape()[1]);
    let rows = input.numel() / k;
    let (x, wt, go) = (input.data(), weights.data(), grad_out.data());
    let mut gin = vec![0f32; rows * k];
    for r in 0..rows {
        for i in 0..k {
            let acc: f64 = (0..m)
                .map(|j| go[r * m + j] as f64 * wt[i * m + j] as f64)
                .sum();
            gin[r * k + i] = acc as f32;
        }
    }
    let mut gw = vec![0f32; k * m];
    for i in 0..k {
        for j in 0..m {
            let acc: f64 = (0..rows)
                .map(|r| x[r * k + i] as f64 * go[r * m + j] as f64)
                .sum();
            gw[i * m + j] = acc as f32;
        }
    }
    let gb = with_bias.then(|| {
        let v = (0..m)
            .map(|j| (0..rows).map(|r| go[r * m + j] as f64).sum::<f64>() as f32)
            .collect();
        Tensor::new([m], v).expect("bias grad shape")
    });
    (
        Tensor::new(input.shape(), gin).expect("input grad shape"),
        Tensor::new(weights.shape(), gw).expect("weight grad shape"),
        gb,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    /// Sigmoid kept inside the open interval (0, 1): results that round to
    /// 0 or 1 in `f32` are pulled to the nearest interior value. Used for
    /// attention gates, which must never fully open or close.
    GateSigmoid,
    Relu,
}

/// Largest `f32` below one.
pub const GATE_MAX: f32 = 1.0 - f32::EPSILON / 2.0;
/// Smallest positive `f32`.
pub const GATE_MIN: f32 = f32::from_bits(1);

pub fn gate_sigmoid_scalar(x: f32) -> f32 {
    sigmoid_scalar(x).clamp(GATE_MIN, GATE_MAX)
}

/// Logistic function evaluated without overflow for any finite input.
pub fn sigmoid_scalar(x: f32) -> f32 {
    let x = x as f64;
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y as f32
}

pub fn activation(input: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Sigmoid => input.map(sigmoid_scalar),
        Activation::GateSigmoid => input.map(gate_sigmoid_scalar),
        Activation::Relu => input.map(|v| v.max(0.0)),
    }
}

/// VJP of [`activation`]; sigmoid uses its output, relu its input.
pub fn activation_backward(
    kind: Activation,
    input: &Tensor,
    output: &Tensor,
    grad_out: &Tensor,
) -> Tensor {
    let data = match kind {
        Activation::Sigmoid | Activation::GateSigmoid => output
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&y, &g)| g * y * (1.0 - y))
            .collect(),
        Activation::Relu => input
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
    };
    Tensor::new(input.shape(), data).expect("activation grad shape")
}

/// Softmax over the channel axis of an N×K×H×W tensor.
pub fn softmax_channels(logits: &Tensor) -> Result<Tensor> {
    let (n, k, h, w) = logits.dims4("softmax_channels")?;
    if k < 2 {
        return Err(Error::contract(
            "softmax_channels",
            format!("need at least 2 channels, got {k}"),
        ));
    }
    let hw = h * w;
    let x = logits.data();
    let mut out = vec![0f32; x.len()];
    par::for_each_chunk_mut(&mut out, k * hw, |b, dst| {
        let src = &x[b * k * hw..][..k * hw];
        let mut e = vec![0f64; k];
        for p in 0..hw {
            let max = (0..k)
                .map(|c| src[c * hw + p])
                .fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut sum = 0.0;
            for c in 0..k {
                e[c] = (src[c * hw + p] as f64 - max).exp();
                sum += e[c];
            }
            for c in 0..k {
                dst[c * hw + p] = (e[c] / sum) as f32;
            }
        }
    });
    let _ = n;
    Tensor::new(logits.shape(), out)
}

pub fn softmax_channels_backward(probs: &Tensor, grad_out: &Tensor) -> Tensor {
    let s = probs.shape();
    let (k, hw) = (s[1], s[2] * s[3]);
    let (y, go) = (probs.data(), grad_out.data());
    let mut gin = vec![0f32; y.len()];
    for b in 0..s[0] {
        let base = b * k * hw;
        for p in 0..hw {
            let dot: f64 = (0..k)
                .map(|c| y[base + c * hw + p] as f64 * go[base + c * hw + p] as f64)
                .sum();
            for c in 0..k {
                let i = base + c * hw + p;
                gin[i] = (y[i] as f64 * (go[i] as f64 - dot)) as f32;
            }
        }
    }
    Tensor::new(s, gin).expect("softmax grad shape")
}

/// Shape of `a ⊙ b` under same-rank broadcasting (each dim equal or 1).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Flat source offset of each output element for an operand broadcast to `out`.
fn broadcast_offsets(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for d in (0..rank).rev() {
        strides[d] = if src[d] == 1 { 0 } else { s };
        s *= src[d];
    }
    let total: usize = out.iter().product();
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Mul,
}

pub fn binary(a: &Tensor, b: &Tensor, op: Binary) -> Result<Tensor> {
    let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
        Error::contract(
            "broadcast",
            format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()),
        )
    })?;
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| match op {
                Binary::Add => x + y,
                Binary::Mul => x * y,
            })
            .collect();
        return Tensor::new(shape, data);
    }
    let oa = broadcast_offsets(a.shape(), &shape);
    let ob = broadcast_offsets(b.shape(), &shape);
    let (x, y) = (a.data(), b.data());
    let data = oa
        .iter()
        .zip(&ob)
        .map(|(&i, &j)| match op {
            Binary::Add => x[i] + y[j],
            Binary::Mul => x[i] * y[j],
        })
        .collect();
    Tensor::new(shape, data)
}

/// Gradients of [`binary`] reduced back to each operand's shape.
pub fn binary_backward(a: &Tensor, b: &Tensor, op: Binary, grad_out: &Tensor) -> (Tensor, Tensor) {
    let shape = grad_out.shape();
    let oa = broadcast_offsets(a.shape(), shape);
    let ob = broadcast_offsets(b.shape(), shape);
    let mut ga = vec![0f64; a.numel()];
    let mut gb = vec![0f64; b.numel()];
    let (x, y, g) = (a.data(), b.data(), grad_out.data());
    for ((&i, &j), &gv) in oa.iter().zip(&ob).zip(g) {
        let gv = gv as f64;
        match op {
            Binary::Add => {
                ga[i] += gv;
                gb[j] += gv;
            }
            Binary::Mul => {
                ga[i] += gv * y[j] as f64;
                gb[j] += gv * x[i] as f64;
            }
        }
    }
    let to = |v: Vec<f64>, s: &[usize]| {
        Tensor::new(s, v.into_iter().map(|e| e as f32).collect()).expect("grad shape")
    };
    (to(ga, a.shape()), to(gb, b.shape()))
}

/// Concatenates N×Ci×H×W tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::contract("concat", "nothing to concatenate"))?;
    let (n, _, h, w) = first.dims4("concat")?;
    let mut total_c = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4("concat")?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::contract(
                "concat",
                format!(
                    "shape {:?} does not match {:?} outside the channel axis",
                    p.shape(),
                    first.shape()
                ),
            ));
        }
        total_c += pc;
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * total_c * hw);
    for b in 0..n {
        for p in parts {
            let c = p.shape()[1];
            data.extend_from_slice(&p.data()[b * c * hw..(b + 1) * c * hw]);
        }
    }
    Tensor::new([n, total_c, h, w], data)
}

pub fn concat_channels_backward(channels: &[usize], grad_out: &Tensor) -> Vec<Tensor> {
    let s = grad_out.shape();
    let (n, total, hw) = (s[0], s[1], s[2] * s[3]);
    let g = grad_out.data();
    let mut offset = 0;
    channels
        .iter()
        .map(|&c| {
            let mut data = Vec::with_capacity(n * c * hw);
            for b in 0..n {
                data.extend_from_slice(
                    &g[(b * total + offset) * hw..(b * total + offset + c) * hw],
                );
            }
            offset += c;
            Tensor::new([n, c, s[2], s[3]], data).expect("concat grad shape")
        })
        .collect()
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(input: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4("upsample")?;
    if factor == 0 {
        return Err(Error::contract("upsample", "factor must be positive"));
    }
    let (oh, ow) = (h * factor, w * factor);
    let x = input.data();
    let mut out = vec![0f32; n * c * oh * ow];
    par::for_each_chunk_mut(&mut out, oh * ow, |plane, dst| {
        let src = &x[plane * h * w..][..h * w];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / factor) * w + xx / factor];
            }
        }
    });
    Tensor::new([n, c, oh, ow], out)
}

pub fn upsample_nearest_backward(
    input_shape: &[usize],
    factor: usize,
    grad_out: &Tensor,
) -> Tensor {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (h * factor, w * factor);
    let planes = input_shape[0] * input_shape[1];
    let g = grad_out.data();
    let mut gin = vec![0f32; planes * h * w];
    par::for_each_chunk_mut(&mut gin, h * w, |plane, dst| {
        let src = &g[plane * oh * ow..][..oh * ow];
        let mut acc = vec![0f64; h * w];
        for y in 0..oh {
            for x in 0..ow {
                acc[(y / factor) * w + x / factor] += src[y * ow + x] as f64;
            }
        }
        for (d, a) in dst.iter_mut().zip(acc) {
            *d = a as f32;
        }
    });
    Tensor::new(input_shape, gin).expect("upsample grad shape")
}

pub fn sum(input: &Tensor) -> Tensor {
    Tensor::scalar(input.data().iter().map(|&v| v as f64).sum::<f64>() as f32)
}

/// Mean pixelwise cross-entropy of N×K×H×W logits against `targets`
/// (N·H·W labels). Returns `(loss, softmax probabilities, scored pixel count)`;
/// the loss is the unrounded `f64` mean.
pub fn cross_entropy(
    logits: &Tensor,
    targets: &[u8],
    ignore: Option<u8>,
) -> Result<(f64, Tensor, usize)> {
    let (n, k, h, w) = logits.dims4("cross_entropy")?;
    let hw = h * w;
    if targets.len() != n * hw {
        return Err(Error::contract(
            "cross_entropy",
            format!(
                "{} targets for logits of shape {:?}",
                targets.len(),
                logits.shape()
            ),
        ));
    }
    if let Some((i, &t)) = targets
        .iter()
        .enumerate()
        .find(|&(_, &t)| Some(t) != ignore && t as usize >= k)
    {
        return Err(Error::contract(
            "cross_entropy",
            format!("target {t} at pixel {i} is not below the class count {k}"),
        ));
    }
    let x = logits.data();
    let mut total = 0f64;
    let mut count = 0usize;
    for b in 0..n {
        let base = b * k * hw;
        for p in 0..hw {
            let t = targets[b * hw + p];
            if Some(t) == ignore {
                continue;
            }
            let max = (0..k)
                .map(|c| x[base + c * hw + p])
                .fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = max
                + (0..k)
                    .map(|c| (x[base + c * hw + p] as f64 - max).exp())
                    .sum::<f64>()
                    .ln();
            total += lse - x[base + t as usize * hw + p] as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::contract(
            "cross_entropy",
            "every pixel is ignored; the mean loss is undefined",
        ));
    }
    let probs = softmax_channels(logits)?;
    Ok((total / count as f64, probs, count))
}

/// `(p − onehot) · g / count` on scored pixels, zero on ignored ones.
pub fn cross_entropy_backward(
    probs: &Tensor,
    targets: &[u8],
    ignore: Option<u8>,
    count: usize,
    grad: f32,
) -> Tensor {
    let s = probs.shape();
    let (k, hw) = (s[1], s[2] * s[3]);
    let scale = grad as f64 / count as f64;
    let p = probs.data();
    let mut gin = vec![0f32; p.len()];
    for b in 0..s[0] {
        let base = b * k * hw;
        for px in 0..hw {
            let t = targets[b * hw + px];
            if Some(t) == ignore {
                continue;
            }
            for c in 0..k {
                let i = base + c * hw + px;
                let onehot = if c == t as usize { 1.0 } else { 0.0 };
                gin[i] = ((p[i] as f64 - onehot) * scale) as f32;
            }
        }
    }
    Tensor::new(s, gin).expect("cross entropy grad shape")
}
