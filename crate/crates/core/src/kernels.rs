//! Raw compute kernels over NCHW slices. No tape involvement here.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar};

/// Hyperparameters of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl ConvSpec {
    /// Stride 1, "same" padding for odd square kernels.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, groups: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: (1, 1),
            padding: (kernel / 2, kernel / 2),
            groups,
        }
    }

    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: (padding, padding),
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            groups,
            ..
        } = *self;
        if in_channels == 0 || out_channels == 0 || groups == 0 {
            return Err(Error::invalid("conv2d", "channels and groups must be positive"));
        }
        if in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("channels {in_channels}->{out_channels} not divisible by groups {groups}"),
            ));
        }
        if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::invalid("conv2d", "kernel and stride must be positive"));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    /// Output spatial size for an `h × w` input; errors on empty output.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = window_out(h, self.kernel.0, self.stride.0, self.padding.0);
        let ow = window_out(w, self.kernel.1, self.stride.1, self.padding.1);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::invalid(
                "conv2d",
                format!("input {h}x{w} gives an empty output for {self:?}"),
            )),
        }
    }
}

/// `floor((n + 2p - k) / s) + 1`, or `None` if the window does not fit.
pub fn window_out(n: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    let padded = n + 2 * p;
    if padded < k || s == 0 {
        return None;
    }
    Some((padded - k) / s + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    fn is_pointwise(&self, spec: &ConvSpec) -> bool {
        spec.kernel == (1, 1) && spec.stride == (1, 1) && spec.padding == (0, 0)
    }
}

/// Output columns `lo..hi` whose input column `ox * stride + k - pad` lies inside `0..w`.
fn valid_cols(ow: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride).min(ow);
    let hi = if w + pad > k { (w + pad - k).div_ceil(stride).min(ow) } else { 0 };
    (lo, hi.max(lo))
}

fn im2col<T: Scalar>(x: &[T], cin: usize, d: &ConvDims, spec: &ConvSpec, col: &mut [T]) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let cols = d.oh * d.ow;
    for c in 0..cin {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..kh {
            for kj in 0..kw {
                let (lo, hi) = valid_cols(d.ow, d.w, kj, sw, pw);
                let row = ((c * kh + ki) * kw + kj) * cols;
                let dst = &mut col[row..row + cols];
                for oy in 0..d.oh {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    let out = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    if lo == hi {
                        continue;
                    }
                    let first = lo * sw + kj - pw;
                    if sw == 1 {
                        out[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (o, &v) in out[lo..hi].iter_mut().zip(src[first..].iter().step_by(sw)) {
                            *o = v;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], cin: usize, d: &ConvDims, spec: &ConvSpec, dx: &mut [T]) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let cols = d.oh * d.ow;
    for c in 0..cin {
        let plane = &mut dx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..kh {
            for kj in 0..kw {
                let (lo, hi) = valid_cols(d.ow, d.w, kj, sw, pw);
                let row = ((c * kh + ki) * kw + kj) * cols;
                let src = &col[row..row + cols];
                for oy in 0..d.oh {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    if iy < 0 || iy >= d.h as isize || lo == hi {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let s = &src[oy * d.ow + lo..oy * d.ow + hi];
                    let first = lo * sw + kj - pw;
                    if sw == 1 {
                        for (o, &v) in dst[first..first + hi - lo].iter_mut().zip(s) {
                            *o += v;
                        }
                    } else {
                        for (o, &v) in dst[first..].iter_mut().step_by(sw).zip(s) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    spec: &ConvSpec,
    d: &ConvDims,
) -> Vec<T> {
    let g = spec.groups;
    let cin_g = spec.in_channels / g;
    let cout_g = spec.out_channels / g;
    let kk = cin_g * spec.kernel.0 * spec.kernel.1;
    let in_stride = spec.in_channels * d.h * d.w;
    let out_hw = d.oh * d.ow;
    let out_stride = spec.out_channels * out_hw;
    let pointwise = d.is_pointwise(spec);
    let mut out = vec![T::zero(); d.n * out_stride];
    out.par_chunks_mut(out_stride)
        .enumerate()
        .for_each(|(n, out_n)| {
            let x_n = &x[n * in_stride..(n + 1) * in_stride];
            let mut col = if pointwise { Vec::new() } else { vec![T::zero(); kk * out_hw] };
            for gi in 0..g {
                let x_g = &x_n[gi * cin_g * d.h * d.w..(gi + 1) * cin_g * d.h * d.w];
                let cols: &[T] = if pointwise {
                    x_g
                } else {
                    im2col(x_g, cin_g, d, spec, &mut col);
                    &col
                };
                let w_g = &weight[gi * cout_g * kk..(gi + 1) * cout_g * kk];
                let o_g = &mut out_n[gi * cout_g * out_hw..(gi + 1) * cout_g * out_hw];
                gemm(cout_g, kk, out_hw, w_g, false, cols, false, T::zero(), o_g);
            }
            if let Some(b) = bias {
                for (c, plane) in out_n.chunks_mut(out_hw).enumerate() {
                    for v in plane {
                        *v += b[c];
                    }
                }
            }
        });
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    spec: &ConvSpec,
    d: &ConvDims,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let g = spec.groups;
    let cin_g = spec.in_channels / g;
    let cout_g = spec.out_channels / g;
    let kk = cin_g * spec.kernel.0 * spec.kernel.1;
    let in_stride = spec.in_channels * d.h * d.w;
    let out_hw = d.oh * d.ow;
    let out_stride = spec.out_channels * out_hw;
    let pointwise = d.is_pointwise(spec);

    // Per-sample partial results; weight/bias partials are reduced in sample order below
    // so the result does not depend on thread scheduling.
    let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..d.n)
        .into_par_iter()
        .map(|n| {
            let x_n = &x[n * in_stride..(n + 1) * in_stride];
            let dout_n = &dout[n * out_stride..(n + 1) * out_stride];
            let mut col = vec![T::zero(); if pointwise { 0 } else { kk * out_hw }];
            let mut dcol = vec![T::zero(); if need_dx && !pointwise { kk * out_hw } else { 0 }];
            let mut dx_n = if need_dx { Some(vec![T::zero(); in_stride]) } else { None };
            let mut dw_n = if need_dw { Some(vec![T::zero(); weight.len()]) } else { None };
            for gi in 0..g {
                let w_g = &weight[gi * cout_g * kk..(gi + 1) * cout_g * kk];
                let do_g = &dout_n[gi * cout_g * out_hw..(gi + 1) * cout_g * out_hw];
                if let Some(dw) = dw_n.as_mut() {
                    let x_g = &x_n[gi * cin_g * d.h * d.w..(gi + 1) * cin_g * d.h * d.w];
                    let cols: &[T] = if pointwise {
                        x_g
                    } else {
                        im2col(x_g, cin_g, d, spec, &mut col);
                        &col
                    };
                    let dw_g = &mut dw[gi * cout_g * kk..(gi + 1) * cout_g * kk];
                    gemm(cout_g, out_hw, kk, do_g, false, cols, true, T::zero(), dw_g);
                }
                if let Some(dx) = dx_n.as_mut() {
                    let dx_g = &mut dx[gi * cin_g * d.h * d.w..(gi + 1) * cin_g * d.h * d.w];
                    if pointwise {
                        gemm(kk, cout_g, out_hw, w_g, true, do_g, false, T::zero(), dx_g);
                    } else {
                        gemm(kk, cout_g, out_hw, w_g, true, do_g, false, T::zero(), &mut dcol);
                        col2im(&dcol, cin_g, d, spec, dx_g);
                    }
                }
            }
            (dx_n, dw_n)
        })
        .collect();

    let mut dx = if need_dx { Some(Vec::with_capacity(d.n * in_stride)) } else { None };
    let mut dw = if need_dw { Some(vec![T::zero(); weight.len()]) } else { None };
    for (dx_n, dw_n) in per_sample {
        if let (Some(acc), Some(part)) = (dx.as_mut(), dx_n) {
            acc.extend_from_slice(&part);
        }
        if let (Some(acc), Some(part)) = (dw.as_mut(), dw_n) {
            for (a, p) in acc.iter_mut().zip(part) {
                *a += p;
            }
        }
    }
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); spec.out_channels];
        for n in 0..d.n {
            let dout_n = &dout[n * out_stride..(n + 1) * out_stride];
            for (c, plane) in dout_n.chunks(out_hw).enumerate() {
                db[c] += plane.iter().copied().sum::<T>();
            }
        }
        db
    });
    ConvGrads { dx, dw, db }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PoolDims {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    pub k: (usize, usize),
    pub s: (usize, usize),
}

/// Returns the pooled values and, for max pooling, the flat input index of each maximum.
pub(crate) fn pool2d_forward<T: Scalar>(x: &[T], kind: PoolKind, d: &PoolDims) -> (Vec<T>, Vec<usize>) {
    let mut out = Vec::with_capacity(d.planes * d.oh * d.ow);
    let mut argmax = Vec::new();
    let inv = T::one() / T::lit((d.k.0 * d.k.1) as f64);
    for p in 0..d.planes {
        let base = p * d.h * d.w;
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                let mut best = T::neg_infinity();
                let mut best_idx = 0;
                let mut acc = T::zero();
                for ki in 0..d.k.0 {
                    for kj in 0..d.k.1 {
                        let idx = base + (oy * d.s.0 + ki) * d.w + ox * d.s.1 + kj;
                        let v = x[idx];
                        match kind {
                            PoolKind::Max => {
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                            PoolKind::Avg => acc += v,
                        }
                    }
                }
                match kind {
                    PoolKind::Max => {
                        out.push(best);
                        argmax.push(best_idx);
                    }
                    PoolKind::Avg => out.push(acc * inv),
                }
            }
        }
    }
    (out, argmax)
}

pub(crate) fn avg_pool2d_backward<T: Scalar>(dout: &[T], d: &PoolDims) -> Vec<T> {
    let mut dx = vec![T::zero(); d.planes * d.h * d.w];
    let inv = T::one() / T::lit((d.k.0 * d.k.1) as f64);
    for p in 0..d.planes {
        let base = p * d.h * d.w;
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                let g = dout[(p * d.oh + oy) * d.ow + ox] * inv;
                for ki in 0..d.k.0 {
                    for kj in 0..d.k.1 {
                        dx[base + (oy * d.s.0 + ki) * d.w + ox * d.s.1 + kj] += g;
                    }
                }
            }
        }
    }
    dx
}

/// Batch statistics over every axis except the channel axis (axis 1).
pub(crate) fn channel_moments<T: Scalar>(x: &[T], n: usize, c: usize, inner: usize) -> (Vec<T>, Vec<T>) {
    let count = T::lit((n * inner) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for i in 0..n {
            let base = (i * c + ch) * inner;
            s += x[base..base + inner].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut ss = T::zero();
        for i in 0..n {
            let base = (i * c + ch) * inner;
            for &v in &x[base..base + inner] {
                let dv = v - m;
                ss += dv * dv;
            }
        }
        mean[ch] = m;
        var[ch] = ss / count;
    }
    (mean, var)
}
