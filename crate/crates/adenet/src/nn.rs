//! Forward/backward kernels for every layer the models use.
//!
//! Kernels are pure: identical inputs give bit-identical outputs, including
//! under internal rayon parallelism (all reductions run in a fixed order and
//! parallel writes target disjoint output planes).

#![allow(clippy::needless_range_loop, clippy::too_many_arguments, clippy::manual_memcpy)]

use crate::tensor::{Scalar, Tensor};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("channel mismatch: input has {input} channels, layer expects {expected}")]
    ChannelMismatch { input: usize, expected: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("spatial dims too small: {h}x{w}, need at least {min}x{min}")]
    SpatialTooSmall { h: usize, w: usize, min: usize },
    #[error("eps must be positive, got {0}")]
    InvalidEps(f64),
    #[error("label {label} out of range for {classes} classes at row {row}")]
    LabelOutOfRange {
        label: usize,
        classes: usize,
        row: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Convolution weights: (co, ci, kh, kw) row-major plus per-filter bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub co: usize,
    pub ci: usize,
    pub k: usize,
    pub pad: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn zeros(co: usize, ci: usize, k: usize, pad: usize) -> Self {
        ConvParams {
            co,
            ci,
            k,
            pad,
            weight: vec![T::zero(); co * ci * k * k],
            bias: vec![T::zero(); co],
        }
    }

    #[inline(always)]
    pub fn widx(&self, o: usize, c: usize, u: usize, v: usize) -> usize {
        ((o * self.ci + c) * self.k + u) * self.k + v
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        (h + 2 * self.pad + 1 - self.k, w + 2 * self.pad + 1 - self.k)
    }
}

pub struct ConvCtx<T> {
    pub x: Tensor<T>,
}

/// Unroll one sample into a (ci*k*k, ho*wo) patch matrix; out-of-range taps
/// stay zero. Row kk corresponds to the (c, u, v) tap in weight order, so the
/// convolution becomes a plain matrix product against the (co, ci*k*k)
/// weights.
fn im2col<T: Scalar>(
    x: &Tensor<T>,
    n: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let p = ho * wo;
    let mut col = vec![T::zero(); x.c * k * k * p];
    let mut kk = 0usize;
    for c in 0..x.c {
        for u in 0..k {
            for v in 0..k {
                let base = kk * p;
                for i in 0..ho {
                    let ii = (i + u).wrapping_sub(pad);
                    if ii >= x.h {
                        continue;
                    }
                    let jlo = pad.saturating_sub(v);
                    let jhi = (x.w + pad - v).min(wo);
                    if jlo >= jhi {
                        continue;
                    }
                    let row = x.idx(n, c, ii, 0);
                    col[base + i * wo + jlo..base + i * wo + jhi]
                        .copy_from_slice(&x.data[row + jlo + v - pad..row + jhi + v - pad]);
                }
                kk += 1;
            }
        }
    }
    col
}

/// Scatter-add a patch matrix back into (c, h, w) planes of one sample.
fn col2im_add<T: Scalar>(
    col: &[T],
    dx: &mut [T],
    c_count: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let p = ho * wo;
    let mut kk = 0usize;
    for c in 0..c_count {
        for u in 0..k {
            for v in 0..k {
                let base = kk * p;
                for i in 0..ho {
                    let ii = (i + u).wrapping_sub(pad);
                    if ii >= h {
                        continue;
                    }
                    let jlo = pad.saturating_sub(v);
                    let jhi = (w + pad - v).min(wo);
                    if jlo >= jhi {
                        continue;
                    }
                    let drow = (c * h + ii) * w;
                    let dst = &mut dx[drow + jlo + v - pad..drow + jhi + v - pad];
                    for (d, s) in dst.iter_mut().zip(&col[base + i * wo + jlo..base + i * wo + jhi])
                    {
                        *d = *d + *s;
                    }
                }
                kk += 1;
            }
        }
    }
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], x: &[T], a: T) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv = *yv + a * *xv;
    }
}

/// Multi-accumulator dot product; the lane split keeps the reduction
/// vectorizable and its summation order fixed.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let chunks = a.len() / LANES;
    let mut acc = [T::zero(); LANES];
    for i in 0..chunks {
        let av = &a[i * LANES..(i + 1) * LANES];
        let bv = &b[i * LANES..(i + 1) * LANES];
        for l in 0..LANES {
            acc[l] = acc[l] + av[l] * bv[l];
        }
    }
    let mut s = T::zero();
    for l in 0..LANES {
        s = s + acc[l];
    }
    for i in chunks * LANES..a.len() {
        s = s + a[i] * b[i];
    }
    s
}

/// Stride-1 correlation with zero padding. 3x3 same-pad and 5x5 valid are the
/// two configurations the models use.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
) -> Result<(Tensor<T>, ConvCtx<T>)> {
    if x.n == 0 {
        return Err(NnError::EmptyBatch);
    }
    if x.c != p.ci {
        return Err(NnError::ChannelMismatch {
            input: x.c,
            expected: p.ci,
        });
    }
    let (ho, wo) = p.out_spatial(x.h, x.w);
    if x.h + 2 * p.pad < p.k || x.w + 2 * p.pad < p.k {
        return Err(NnError::SpatialTooSmall {
            h: x.h,
            w: x.w,
            min: p.k - 2 * p.pad,
        });
    }
    let mut y = Tensor::zeros(x.n, p.co, ho, wo);
    let plane = ho * wo;
    let kdim = p.ci * p.k * p.k;
    let sample_out = p.co * plane;
    y.data
        .par_chunks_mut(sample_out)
        .enumerate()
        .for_each(|(n, out)| {
            let col = im2col(x, n, p.k, p.pad, ho, wo);
            // Block over output channels so each im2col row is read once
            // per block instead of once per channel.
            const OB: usize = 8;
            let mut o0 = 0;
            while o0 < p.co {
                let olim = (o0 + OB).min(p.co);
                for o in o0..olim {
                    out[o * plane..(o + 1) * plane].fill(p.bias[o]);
                }
                for kk in 0..kdim {
                    let crow = &col[kk * plane..(kk + 1) * plane];
                    for o in o0..olim {
                        axpy(&mut out[o * plane..(o + 1) * plane], crow, p.weight[o * kdim + kk]);
                    }
                }
                o0 = olim;
            }
        });
    Ok((y, ConvCtx { x: x.clone() }))
}

/// Returns (dx, dweight, dbias).
pub fn conv2d_backward<T: Scalar>(
    p: &ConvParams<T>,
    ctx: &ConvCtx<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let x = &ctx.x;
    let (ho, wo) = p.out_spatial(x.h, x.w);
    if dy.shape() != (x.n, p.co, ho, wo) {
        return Err(NnError::ShapeMismatch(format!(
            "conv backward expects dy {:?}, got {:?}",
            (x.n, p.co, ho, wo),
            dy.shape()
        )));
    }

    let plane = ho * wo;
    let kdim = p.ci * p.k * p.k;

    // per-sample partials, reduced in index order so results stay
    // deterministic under parallelism
    let partials: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..x.n)
        .into_par_iter()
        .map(|n| {
            let col = im2col(x, n, p.k, p.pad, ho, wo);
            let dy_base = n * p.co * plane;
            let mut dw_n = vec![T::zero(); p.weight.len()];
            let mut db_n = vec![T::zero(); p.co];
            let mut dcol = vec![T::zero(); kdim * plane];
            for o in 0..p.co {
                let grow = &dy.data[dy_base + o * plane..dy_base + (o + 1) * plane];
                db_n[o] = grow.iter().copied().sum();
            }
            // Block over col rows so each dy row is read once per block.
            const KB: usize = 8;
            let mut kk0 = 0;
            while kk0 < kdim {
                let klim = (kk0 + KB).min(kdim);
                for o in 0..p.co {
                    let grow = &dy.data[dy_base + o * plane..dy_base + (o + 1) * plane];
                    for kk in kk0..klim {
                        dw_n[o * kdim + kk] = dot(grow, &col[kk * plane..(kk + 1) * plane]);
                        axpy(
                            &mut dcol[kk * plane..(kk + 1) * plane],
                            grow,
                            p.weight[o * kdim + kk],
                        );
                    }
                }
                kk0 = klim;
            }
            let mut dx_n = vec![T::zero(); x.c * x.h * x.w];
            col2im_add(&dcol, &mut dx_n, x.c, x.h, x.w, p.k, p.pad, ho, wo);
            (dx_n, dw_n, db_n)
        })
        .collect();

    let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
    let mut dw = vec![T::zero(); p.weight.len()];
    let mut db = vec![T::zero(); p.co];
    let sample = x.c * x.h * x.w;
    for (n, (dx_n, dw_n, db_n)) in partials.into_iter().enumerate() {
        dx.data[n * sample..(n + 1) * sample].copy_from_slice(&dx_n);
        for (a, b) in dw.iter_mut().zip(&dw_n) {
            *a = *a + *b;
        }
        for (a, b) in db.iter_mut().zip(&db_n) {
            *a = *a + *b;
        }
    }
    Ok((dx, dw, db))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

pub struct BnCtx<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub gamma: Vec<T>,
    /// Per-channel batch mean/var, kept so the normalization can be inverted.
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Per-channel batch normalization over (n, h, w). Train mode uses batch
/// statistics (biased variance) and updates the running stats by EMA; infer
/// mode uses the running stats only.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
    mode: BnMode,
    eps: T,
    momentum: T,
) -> Result<(Tensor<T>, BnCtx<T>)> {
    if x.n == 0 {
        return Err(NnError::EmptyBatch);
    }
    if gamma.len() != x.c || beta.len() != x.c || running_mean.len() != x.c {
        return Err(NnError::ChannelMismatch {
            input: x.c,
            expected: gamma.len(),
        });
    }
    if eps <= T::zero() {
        return Err(NnError::InvalidEps(eps.to_f64()));
    }
    let m = T::from_f64((x.n * x.h * x.w) as f64);
    let (mean, var) = match mode {
        BnMode::Train => {
            let mut mean = vec![T::zero(); x.c];
            let mut var = vec![T::zero(); x.c];
            for c in 0..x.c {
                let mut s = T::zero();
                for n in 0..x.n {
                    let base = x.idx(n, c, 0, 0);
                    for k in 0..x.h * x.w {
                        s = s + x.data[base + k];
                    }
                }
                mean[c] = s / m;
                let mut v = T::zero();
                for n in 0..x.n {
                    let base = x.idx(n, c, 0, 0);
                    for k in 0..x.h * x.w {
                        let d = x.data[base + k] - mean[c];
                        v = v + d * d;
                    }
                }
                var[c] = v / m;
                running_mean[c] = momentum * running_mean[c] + (T::one() - momentum) * mean[c];
                running_var[c] = momentum * running_var[c] + (T::one() - momentum) * var[c];
            }
            (mean, var)
        }
        BnMode::Infer => (running_mean.to_vec(), running_var.to_vec()),
    };

    let mut y = Tensor::zeros(x.n, x.c, x.h, x.w);
    let mut xhat = Tensor::zeros(x.n, x.c, x.h, x.w);
    let mut inv_std = vec![T::zero(); x.c];
    for c in 0..x.c {
        inv_std[c] = T::one() / (var[c] + eps).sqrt();
        for n in 0..x.n {
            let base = x.idx(n, c, 0, 0);
            for k in 0..x.h * x.w {
                let xh = (x.data[base + k] - mean[c]) * inv_std[c];
                xhat.data[base + k] = xh;
                y.data[base + k] = gamma[c] * xh + beta[c];
            }
        }
    }
    Ok((
        y,
        BnCtx {
            xhat,
            inv_std,
            gamma: gamma.to_vec(),
            mean,
            var,
        },
    ))
}

/// Train-mode backward. Returns (dx, dgamma, dbeta).
pub fn batchnorm_backward<T: Scalar>(
    ctx: &BnCtx<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let xhat = &ctx.xhat;
    if dy.shape() != xhat.shape() {
        return Err(NnError::ShapeMismatch(format!(
            "bn backward expects dy {:?}, got {:?}",
            xhat.shape(),
            dy.shape()
        )));
    }
    let c_count = xhat.c;
    let m = T::from_f64((xhat.n * xhat.h * xhat.w) as f64);
    let mut dgamma = vec![T::zero(); c_count];
    let mut dbeta = vec![T::zero(); c_count];
    let mut dx = Tensor::zeros(xhat.n, xhat.c, xhat.h, xhat.w);
    for c in 0..c_count {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for n in 0..xhat.n {
            let base = xhat.idx(n, c, 0, 0);
            for k in 0..xhat.h * xhat.w {
                sum_dy = sum_dy + dy.data[base + k];
                sum_dy_xhat = sum_dy_xhat + dy.data[base + k] * xhat.data[base + k];
            }
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let scale = ctx.gamma[c] * ctx.inv_std[c] / m;
        for n in 0..xhat.n {
            let base = xhat.idx(n, c, 0, 0);
            for k in 0..xhat.h * xhat.w {
                dx.data[base + k] = scale
                    * (m * dy.data[base + k] - sum_dy - xhat.data[base + k] * sum_dy_xhat);
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

pub struct ReluCtx<T> {
    pub x: Tensor<T>,
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, ReluCtx<T>) {
    let mut y = x.clone();
    for v in y.data.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    (y, ReluCtx { x: x.clone() })
}

pub fn relu_backward<T: Scalar>(ctx: &ReluCtx<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if dy.shape() != ctx.x.shape() {
        return Err(NnError::ShapeMismatch(format!(
            "relu backward expects dy {:?}, got {:?}",
            ctx.x.shape(),
            dy.shape()
        )));
    }
    let mut dx = dy.clone();
    for (d, &xv) in dx.data.iter_mut().zip(ctx.x.data.iter()) {
        if xv <= T::zero() {
            *d = T::zero();
        }
    }
    Ok(dx)
}

pub struct MaxPoolCtx {
    pub in_shape: (usize, usize, usize, usize),
    /// Flat input index of the max of each 2x2 window; ties take the
    /// smallest row-major index.
    pub argmax: Vec<usize>,
}

/// 2x2 stride-2 max pool; odd trailing row/column dropped.
pub fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, MaxPoolCtx)> {
    if x.h < 2 || x.w < 2 {
        return Err(NnError::SpatialTooSmall {
            h: x.h,
            w: x.w,
            min: 2,
        });
    }
    let (ho, wo) = (x.h / 2, x.w / 2);
    let mut y = Tensor::zeros(x.n, x.c, ho, wo);
    let mut argmax = vec![0usize; y.len()];
    let mut oi = 0;
    for n in 0..x.n {
        for c in 0..x.c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = x.idx(n, c, 2 * i, 2 * j);
                    let mut bv = x.data[best];
                    for (du, dv) in [(0, 1), (1, 0), (1, 1)] {
                        let k = x.idx(n, c, 2 * i + du, 2 * j + dv);
                        if x.data[k] > bv {
                            bv = x.data[k];
                            best = k;
                        }
                    }
                    y.data[oi] = bv;
                    argmax[oi] = best;
                    oi += 1;
                }
            }
        }
    }
    Ok((
        y,
        MaxPoolCtx {
            in_shape: x.shape(),
            argmax,
        },
    ))
}

pub fn maxpool2_backward<T: Scalar>(ctx: &MaxPoolCtx, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = ctx.in_shape;
    if dy.len() != ctx.argmax.len() {
        return Err(NnError::ShapeMismatch(format!(
            "maxpool backward expects {} grads, got {}",
            ctx.argmax.len(),
            dy.len()
        )));
    }
    let mut dx = Tensor::zeros(n, c, h, w);
    for (oi, &src) in ctx.argmax.iter().enumerate() {
        dx.data[src] = dx.data[src] + dy.data[oi];
    }
    Ok(dx)
}

pub struct AvgPoolCtx {
    pub in_shape: (usize, usize, usize, usize),
}

/// 2x2 stride-2 average pool (LeNet-5 variant).
pub fn avgpool2_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, AvgPoolCtx)> {
    if x.h < 2 || x.w < 2 {
        return Err(NnError::SpatialTooSmall {
            h: x.h,
            w: x.w,
            min: 2,
        });
    }
    let (ho, wo) = (x.h / 2, x.w / 2);
    let quarter = T::from_f64(0.25);
    let mut y = Tensor::zeros(x.n, x.c, ho, wo);
    for n in 0..x.n {
        for c in 0..x.c {
            for i in 0..ho {
                for j in 0..wo {
                    let s = x.at(n, c, 2 * i, 2 * j)
                        + x.at(n, c, 2 * i, 2 * j + 1)
                        + x.at(n, c, 2 * i + 1, 2 * j)
                        + x.at(n, c, 2 * i + 1, 2 * j + 1);
                    y.set(n, c, i, j, s * quarter);
                }
            }
        }
    }
    Ok((y, AvgPoolCtx { in_shape: x.shape() }))
}

pub fn avgpool2_backward<T: Scalar>(ctx: &AvgPoolCtx, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = ctx.in_shape;
    if dy.shape() != (n, c, h / 2, w / 2) {
        return Err(NnError::ShapeMismatch(format!(
            "avgpool backward expects dy {:?}, got {:?}",
            (n, c, h / 2, w / 2),
            dy.shape()
        )));
    }
    let quarter = T::from_f64(0.25);
    let mut dx = Tensor::zeros(n, c, h, w);
    for nn in 0..n {
        for cc in 0..c {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    let g = dy.at(nn, cc, i, j) * quarter;
                    dx.set(nn, cc, 2 * i, 2 * j, g);
                    dx.set(nn, cc, 2 * i, 2 * j + 1, g);
                    dx.set(nn, cc, 2 * i + 1, 2 * j, g);
                    dx.set(nn, cc, 2 * i + 1, 2 * j + 1, g);
                }
            }
        }
    }
    Ok(dx)
}

pub struct GapCtx {
    pub in_shape: (usize, usize, usize, usize),
}

/// Global average pool: (n, c, h, w) -> (n, c, 1, 1).
pub fn global_avg_pool_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, GapCtx)> {
    if x.h * x.w == 0 {
        return Err(NnError::SpatialTooSmall {
            h: x.h,
            w: x.w,
            min: 1,
        });
    }
    let m = T::from_f64((x.h * x.w) as f64);
    let mut y = Tensor::zeros(x.n, x.c, 1, 1);
    for n in 0..x.n {
        for c in 0..x.c {
            let base = x.idx(n, c, 0, 0);
            let mut s = T::zero();
            for k in 0..x.h * x.w {
                s = s + x.data[base + k];
            }
            y.set(n, c, 0, 0, s / m);
        }
    }
    Ok((y, GapCtx { in_shape: x.shape() }))
}

pub fn global_avg_pool_backward<T: Scalar>(ctx: &GapCtx, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = ctx.in_shape;
    if dy.shape() != (n, c, 1, 1) {
        return Err(NnError::ShapeMismatch(format!(
            "gap backward expects dy {:?}, got {:?}",
            (n, c, 1, 1),
            dy.shape()
        )));
    }
    let m = T::from_f64((h * w) as f64);
    let mut dx = Tensor::zeros(n, c, h, w);
    for nn in 0..n {
        for cc in 0..c {
            let g = dy.at(nn, cc, 0, 0) / m;
            let base = dx.idx(nn, cc, 0, 0);
            for k in 0..h * w {
                dx.data[base + k] = g;
            }
        }
    }
    Ok(dx)
}

pub struct DenseCtx<T> {
    pub x: Tensor<T>,
}

/// y = x·w + b where x is (n, d), w is (d, k) row-major, b is (k).
pub fn dense_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &[T],
    b: &[T],
    d: usize,
    k: usize,
) -> Result<(Tensor<T>, DenseCtx<T>)> {
    if x.c * x.h * x.w != d {
        return Err(NnError::ShapeMismatch(format!(
            "dense expects input dim {}, got {}",
            d,
            x.c * x.h * x.w
        )));
    }
    if w.len() != d * k || b.len() != k {
        return Err(NnError::ShapeMismatch(format!(
            "dense weights {}x{} do not match given buffers",
            d, k
        )));
    }
    let mut y = Tensor::matrix(x.n, k, vec![T::zero(); x.n * k]);
    for n in 0..x.n {
        let xrow = n * d;
        let yrow = n * k;
        for kk in 0..k {
            y.data[yrow + kk] = b[kk];
        }
        for dd in 0..d {
            let xv = x.data[xrow + dd];
            if xv == T::zero() {
                continue;
            }
            let wrow = dd * k;
            for kk in 0..k {
                y.data[yrow + kk] = y.data[yrow + kk] + xv * w[wrow + kk];
            }
        }
    }
    Ok((y, DenseCtx { x: x.clone() }))
}

/// Returns (dx, dw, db).
pub fn dense_backward<T: Scalar>(
    ctx: &DenseCtx<T>,
    w: &[T],
    d: usize,
    k: usize,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let x = &ctx.x;
    if dy.n != x.n || dy.c * dy.h * dy.w != k {
        return Err(NnError::ShapeMismatch(format!(
            "dense backward expects dy ({}, {}), got {:?}",
            x.n,
            k,
            dy.shape()
        )));
    }
    let (n, c, h, wi) = x.shape();
    let mut dx = Tensor::zeros(n, c, h, wi);
    let mut dw = vec![T::zero(); d * k];
    let mut db = vec![T::zero(); k];
    for nn in 0..x.n {
        let xrow = nn * d;
        let yrow = nn * k;
        for kk in 0..k {
            db[kk] = db[kk] + dy.data[yrow + kk];
        }
        for dd in 0..d {
            let mut acc = T::zero();
            let wrow = dd * k;
            for kk in 0..k {
                let g = dy.data[yrow + kk];
                acc = acc + g * w[wrow + kk];
                dw[wrow + kk] = dw[wrow + kk] + g * x.data[xrow + dd];
            }
            dx.data[xrow + dd] = acc;
        }
    }
    Ok((dx, dw, db))
}

pub struct SoftmaxXent<T> {
    pub loss: T,
    pub probs: Tensor<T>,
    pub dlogits: Tensor<T>,
}

/// Softmax + cross-entropy over logits (n, classes) with optional per-class
/// weights. Loss is the weighted mean of -log p[label]; dlogits is its exact
/// gradient, weight * (probs - onehot) / n.
pub fn softmax_xent<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    class_weights: Option<&[T]>,
) -> Result<SoftmaxXent<T>> {
    let n = logits.n;
    let k = logits.c * logits.h * logits.w;
    if n == 0 {
        return Err(NnError::EmptyBatch);
    }
    if labels.len() != n {
        return Err(NnError::ShapeMismatch(format!(
            "{} labels for batch of {}",
            labels.len(),
            n
        )));
    }
    if !logits.all_finite() {
        return Err(NnError::NonFinite("logits"));
    }
    if let Some(w) = class_weights {
        if w.len() != k {
            return Err(NnError::ShapeMismatch(format!(
                "{} class weights for {} classes",
                w.len(),
                k
            )));
        }
        if w.iter().any(|&v| v < T::zero()) {
            return Err(NnError::Other("class weights must be >= 0".into()));
        }
    }
    let mut probs = Tensor::matrix(n, k, vec![T::zero(); n * k]);
    let mut dlogits = Tensor::matrix(n, k, vec![T::zero(); n * k]);
    let inv_n = T::one() / T::from_f64(n as f64);
    let mut loss = T::zero();
    for row in 0..n {
        let label = labels[row];
        if label >= k {
            return Err(NnError::LabelOutOfRange {
                label,
                classes: k,
                row,
            });
        }
        let base = row * k;
        let mut mx = logits.data[base];
        for j in 1..k {
            if logits.data[base + j] > mx {
                mx = logits.data[base + j];
            }
        }
        let mut z = T::zero();
        for j in 0..k {
            let e = (logits.data[base + j] - mx).exp();
            probs.data[base + j] = e;
            z = z + e;
        }
        for j in 0..k {
            probs.data[base + j] = probs.data[base + j] / z;
        }
        let w = class_weights.map_or(T::one(), |cw| cw[label]);
        loss = loss - w * probs.data[base + label].max(T::from_f64(1e-300)).ln() * inv_n;
        for j in 0..k {
            let onehot = if j == label { T::one() } else { T::zero() };
            dlogits.data[base + j] = w * (probs.data[base + j] - onehot) * inv_n;
        }
    }
    Ok(SoftmaxXent {
        loss,
        probs,
        dlogits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(n, c, h, w, data)
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(1, 1, 3, 3, vec![1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let mut p = ConvParams::zeros(1, 1, 3, 1);
        p.weight[4] = 1.0; // center tap
        let (y, _) = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn conv_zero_weights_gives_bias() {
        let x = t(1, 2, 4, 4, vec![0.5; 32]);
        let mut p = ConvParams::zeros(3, 2, 3, 1);
        p.bias = vec![1.0, -2.0, 0.25];
        let (y, _) = conv2d_forward(&x, &p).unwrap();
        for o in 0..3 {
            for k in 0..16 {
                assert_eq!(y.data[o * 16 + k], p.bias[o]);
            }
        }
    }

    /// Six-nested-loop direct correlation, the reference for the fast path.
    fn conv_oracle(x: &Tensor<f64>, p: &ConvParams<f64>) -> Tensor<f64> {
        let (ho, wo) = p.out_spatial(x.h, x.w);
        let mut y = Tensor::zeros(x.n, p.co, ho, wo);
        for n in 0..x.n {
            for o in 0..p.co {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = p.bias[o];
                        for c in 0..x.c {
                            for u in 0..p.k {
                                for v in 0..p.k {
                                    let ii = i as isize + u as isize - p.pad as isize;
                                    let jj = j as isize + v as isize - p.pad as isize;
                                    if ii >= 0
                                        && jj >= 0
                                        && (ii as usize) < x.h
                                        && (jj as usize) < x.w
                                    {
                                        acc += x.at(n, c, ii as usize, jj as usize)
                                            * p.weight[p.widx(o, c, u, v)];
                                    }
                                }
                            }
                        }
                        y.set(n, o, i, j, acc);
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_brute_force() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let x = t(1, 2, 4, 4, (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let mut p = ConvParams::zeros(3, 2, 3, 1);
        for w in p.weight.iter_mut() {
            *w = rng.gen_range(-1.0..1.0);
        }
        for b in p.bias.iter_mut() {
            *b = rng.gen_range(-1.0..1.0);
        }
        let (y, _) = conv2d_forward(&x, &p).unwrap();
        let o = conv_oracle(&x, &p);
        for (a, b) in y.data.iter().zip(o.data.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn conv_channel_mismatch_and_empty_batch() {
        let x = t(1, 2, 4, 4, vec![0.0; 32]);
        let p = ConvParams::<f64>::zeros(3, 3, 3, 1);
        assert!(matches!(
            conv2d_forward(&x, &p),
            Err(NnError::ChannelMismatch { .. })
        ));
        let empty = Tensor::<f64>::zeros(0, 3, 4, 4);
        assert!(matches!(
            conv2d_forward(&empty, &p),
            Err(NnError::EmptyBatch)
        ));
    }

    #[test]
    fn bn_zero_variance_channel() {
        let x = t(2, 1, 2, 2, vec![3.0; 8]);
        let mut rm = vec![0.0];
        let mut rv = vec![1.0];
        let (y, _) = batchnorm_forward(
            &x,
            &[1.0],
            &[0.0],
            &mut rm,
            &mut rv,
            BnMode::Train,
            1e-5,
            0.9,
        )
        .unwrap();
        for v in y.data {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn bn_train_moments_match_gamma_beta() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let x = t(
            8,
            4,
            6,
            6,
            (0..8 * 4 * 36).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        );
        let gamma = vec![1.5, -0.5, 2.0, 1.0];
        let beta = vec![0.1, 0.2, -0.3, 0.0];
        let mut rm = vec![0.0; 4];
        let mut rv = vec![1.0; 4];
        let (y, _) = batchnorm_forward(
            &x,
            &gamma,
            &beta,
            &mut rm,
            &mut rv,
            BnMode::Train,
            1e-8,
            0.9,
        )
        .unwrap();
        let m = (8 * 36) as f64;
        for c in 0..4 {
            let mut mean = 0.0;
            for n in 0..8 {
                for k in 0..36 {
                    mean += y.data[y.idx(n, c, 0, 0) + k];
                }
            }
            mean /= m;
            assert!((mean - beta[c]).abs() < 1e-5, "channel {c} mean {mean}");
            let mut var = 0.0;
            for n in 0..8 {
                for k in 0..36 {
                    let d = y.data[y.idx(n, c, 0, 0) + k] - mean;
                    var += d * d;
                }
            }
            var /= m;
            assert!(
                (var.sqrt() - gamma[c].abs()).abs() < 1e-4,
                "channel {c} std {}",
                var.sqrt()
            );
        }
    }

    #[test]
    fn bn_infer_identity() {
        let x = t(1, 2, 2, 2, vec![0.3, -0.7, 1.1, 0.0, 2.0, -1.0, 0.5, 0.25]);
        let mut rm = vec![0.0; 2];
        let mut rv = vec![1.0; 2];
        let (y, _) = batchnorm_forward(
            &x,
            &[1.0, 1.0],
            &[0.0, 0.0],
            &mut rm,
            &mut rv,
            BnMode::Infer,
            1e-12,
            0.9,
        )
        .unwrap();
        for (a, b) in y.data.iter().zip(x.data.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn bn_invertible_within_tolerance() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x = t(4, 2, 3, 3, (0..72).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let gamma = vec![1.2, 0.7];
        let beta = vec![0.5, -0.25];
        let mut rm = vec![0.0; 2];
        let mut rv = vec![1.0; 2];
        let (y, ctx) = batchnorm_forward(
            &x,
            &gamma,
            &beta,
            &mut rm,
            &mut rv,
            BnMode::Train,
            1e-5,
            0.9,
        )
        .unwrap();
        // invert: x = (y - beta)/gamma / inv_std + mean
        for n in 0..4 {
            for c in 0..2 {
                for k in 0..9 {
                    let i = y.idx(n, c, 0, 0) + k;
                    let rec = (y.data[i] - beta[c]) / gamma[c] / ctx.inv_std[c] + ctx.mean[c];
                    assert!((rec - x.data[i]).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn relu_cases() {
        let x = t(1, 1, 1, 3, vec![-1.0, 0.0, 2.0]);
        let (y, ctx) = relu_forward(&x);
        assert_eq!(y.data, vec![0.0, 0.0, 2.0]);
        let dy = t(1, 1, 1, 3, vec![1.0, 1.0, 1.0]);
        let dx = relu_backward(&ctx, &dy).unwrap();
        assert_eq!(dx.data, vec![0.0, 0.0, 1.0]);
        // strictly positive input passes gradient through unchanged
        let xp = t(1, 1, 1, 3, vec![0.5, 1.0, 2.0]);
        let (_, ctxp) = relu_forward(&xp);
        let dxp = relu_backward(&ctxp, &dy).unwrap();
        assert_eq!(dxp.data, dy.data);
    }

    #[test]
    fn maxpool_window_and_tie_rule() {
        let x = t(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let (y, _) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.data, vec![4.0]);

        let c = t(1, 1, 2, 2, vec![5.0; 4]);
        let (y, ctx) = maxpool2_forward(&c).unwrap();
        assert_eq!(y.data, vec![5.0]);
        let dx = maxpool2_backward(&ctx, &t(1, 1, 1, 1, vec![1.0])).unwrap();
        assert_eq!(dx.data, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_matches_window_scan() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x = t(1, 1, 6, 6, (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let (y, _) = maxpool2_forward(&x).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut mx = f64::NEG_INFINITY;
                for u in 0..2 {
                    for v in 0..2 {
                        mx = mx.max(x.at(0, 0, 2 * i + u, 2 * j + v));
                    }
                }
                assert_eq!(y.at(0, 0, i, j), mx);
            }
        }
    }

    #[test]
    fn maxpool_rejects_tiny_input() {
        let x = t(1, 1, 1, 4, vec![0.0; 4]);
        assert!(matches!(
            maxpool2_forward(&x),
            Err(NnError::SpatialTooSmall { .. })
        ));
    }

    #[test]
    fn gap_mean_and_backward() {
        let x = t(1, 1, 4, 4, vec![2.0; 16]);
        let (y, ctx) = global_avg_pool_forward(&x).unwrap();
        assert_eq!(y.data, vec![2.0]);
        let dx = global_avg_pool_backward(&ctx, &t(1, 1, 1, 1, vec![1.0])).unwrap();
        for v in dx.data {
            assert!((v - 1.0 / 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gap_matches_mean_oracle() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = t(
            2,
            3,
            5,
            7,
            (0..2 * 3 * 35).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let (y, _) = global_avg_pool_forward(&x).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                let mut s = 0.0;
                for k in 0..35 {
                    s += x.data[x.idx(n, c, 0, 0) + k];
                }
                assert!((y.at(n, c, 0, 0) - s / 35.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dense_hand_arithmetic() {
        // identity
        let x = t(1, 2, 1, 1, vec![3.0, -1.0]);
        let (y, _) = dense_forward(&x, &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0], 2, 2).unwrap();
        assert_eq!(y.data, vec![3.0, -1.0]);
        // x=[[1,2]], w=[[1,0],[0,3]], b=[1,1] -> [[2,7]]
        let x = t(1, 2, 1, 1, vec![1.0, 2.0]);
        let (y, _) = dense_forward(&x, &[1.0, 0.0, 0.0, 3.0], &[1.0, 1.0], 2, 2).unwrap();
        assert_eq!(y.data, vec![2.0, 7.0]);
        // zeros -> bias rows
        let x = t(2, 2, 1, 1, vec![0.0; 4]);
        let (y, _) = dense_forward(&x, &[5.0; 4], &[1.0, -2.0], 2, 2).unwrap();
        assert_eq!(y.data, vec![1.0, -2.0, 1.0, -2.0]);
    }

    #[test]
    fn softmax_equal_logits() {
        let logits = t(1, 2, 1, 1, vec![0.7, 0.7]);
        let out = softmax_xent(&logits, &[1], None).unwrap();
        assert!((out.probs.data[0] - 0.5).abs() < 1e-9);
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grad_rows_to_zero() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let logits = t(6, 2, 1, 1, (0..12).map(|_| rng.gen_range(-5.0..5.0)).collect());
        let labels = [0, 1, 1, 0, 1, 0];
        let out = softmax_xent(&logits, &labels, None).unwrap();
        assert!(out.loss >= 0.0);
        for r in 0..6 {
            let p = out.probs.data[2 * r] + out.probs.data[2 * r + 1];
            assert!((p - 1.0).abs() < 1e-6);
            let g = out.dlogits.data[2 * r] + out.dlogits.data[2 * r + 1];
            assert!(g.abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_zero_class_weight_removes_contribution() {
        let logits = t(2, 2, 1, 1, vec![0.3, -0.4, 1.0, 2.0]);
        let full = softmax_xent(&logits, &[0, 1], None).unwrap();
        let weighted = softmax_xent(&logits, &[0, 1], Some(&[1.0, 0.0])).unwrap();
        // row 1 (label 1) contributes nothing under weight 0
        assert!(weighted.dlogits.data[2].abs() < 1e-12);
        assert!(weighted.dlogits.data[3].abs() < 1e-12);
        assert!(weighted.loss < full.loss);
    }

    #[test]
    fn softmax_rejects_bad_inputs() {
        let logits = t(1, 2, 1, 1, vec![0.0, f64::NAN]);
        assert!(matches!(
            softmax_xent(&logits, &[0], None),
            Err(NnError::NonFinite(_))
        ));
        let ok = t(1, 2, 1, 1, vec![0.0, 1.0]);
        assert!(matches!(
            softmax_xent(&ok, &[2], None),
            Err(NnError::LabelOutOfRange { .. })
        ));
    }
}
