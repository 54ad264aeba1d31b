//! Channels-last convolution kernels.
//!
//! Convolution weights are stored `[kh, kw, in_channels / groups, out_channels]`; transposed
//! convolution weights are stored `[in_channels, kh, kw, out_channels]`.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::gemm::{gemm, MatRef};
use crate::error::{config_err, shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding so that `out = ceil(in / stride)`.
    Same,
    /// No padding.
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn same(k: usize) -> Self {
        Self {
            kernel: (k, k),
            stride: 1,
            dilation: 1,
            groups: 1,
            padding: Padding::Same,
        }
    }

    pub fn pointwise() -> Self {
        Self::same(1)
    }

    pub fn depthwise(k: usize, channels: usize, dilation: usize) -> Self {
        Self {
            kernel: (k, k),
            stride: 1,
            dilation,
            groups: channels,
            padding: Padding::Same,
        }
    }

    /// Non-overlapping `k × k` stride-`k` patch convolution.
    pub fn patchify(k: usize) -> Self {
        Self {
            kernel: (k, k),
            stride: k,
            dilation: 1,
            groups: 1,
            padding: Padding::Valid,
        }
    }

    pub fn weight_shape(&self, in_channels: usize, out_channels: usize) -> [usize; 4] {
        [self.kernel.0, self.kernel.1, in_channels / self.groups.max(1), out_channels]
    }
}

/// Resolved geometry of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

fn out_size(input: usize, k: usize, stride: usize, dilation: usize, padding: Padding) -> Result<(usize, usize)> {
    let eff = dilation * (k - 1) + 1;
    match padding {
        Padding::Valid => {
            if input < eff {
                return Err(shape_err!("input extent {} smaller than kernel extent {}", input, eff));
            }
            Ok(((input - eff) / stride + 1, 0))
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + eff).saturating_sub(input);
            Ok((out, total / 2))
        }
    }
}

impl ConvGeom {
    pub fn new(spec: &ConvSpec, input: (usize, usize, usize, usize), out_c: usize) -> Result<Self> {
        let (batch, in_h, in_w, in_c) = input;
        if spec.dilation < 1 {
            return Err(config_err!("dilation must be at least 1, got {}", spec.dilation));
        }
        if spec.stride < 1 {
            return Err(config_err!("stride must be at least 1"));
        }
        if spec.kernel.0 < 1 || spec.kernel.1 < 1 {
            return Err(config_err!("kernel size must be positive"));
        }
        if spec.groups < 1 || in_c % spec.groups != 0 || !out_c.is_multiple_of(spec.groups) {
            return Err(config_err!(
                "channels {} -> {} are not divisible by groups {}",
                in_c,
                out_c,
                spec.groups
            ));
        }
        let (out_h, pad_top) = out_size(in_h, spec.kernel.0, spec.stride, spec.dilation, spec.padding)?;
        let (out_w, pad_left) = out_size(in_w, spec.kernel.1, spec.stride, spec.dilation, spec.padding)?;
        Ok(Self {
            batch,
            in_h,
            in_w,
            in_c,
            out_h,
            out_w,
            out_c,
            kh: spec.kernel.0,
            kw: spec.kernel.1,
            stride: spec.stride,
            dilation: spec.dilation,
            groups: spec.groups,
            pad_top,
            pad_left,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_h, self.out_w, self.out_c]
    }

    pub fn weight_len(&self) -> usize {
        self.kh * self.kw * (self.in_c / self.groups) * self.out_c
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.groups == 1
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.in_c && self.out_c == self.in_c
    }

    /// Input coordinate sampled by output `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k * self.dilation) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.in_c
    }
}

fn im2col(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let k = g.patch_len();
    let mut cols = vec![0.0; g.rows() * k];
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((b * g.out_h + oy) * g.out_w + ox) * k;
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.pad_top, g.in_h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src(ox, kx, g.pad_left, g.in_w) else { continue };
                        let src = ((b * g.in_h + iy) * g.in_w + ix) * g.in_c;
                        let dst = row + (ky * g.kw + kx) * g.in_c;
                        cols[dst..dst + g.in_c].copy_from_slice(&x[src..src + g.in_c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let k = g.patch_len();
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((b * g.out_h + oy) * g.out_w + ox) * k;
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.pad_top, g.in_h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src(ox, kx, g.pad_left, g.in_w) else { continue };
                        let dst = ((b * g.in_h + iy) * g.in_w + ix) * g.in_c;
                        let src = row + (ky * g.kw + kx) * g.in_c;
                        for (d, s) in dx[dst..dst + g.in_c].iter_mut().zip(&cols[src..src + g.in_c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias(out: &mut [f64], bias: &[f64]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn bias_grad(dy: &[f64], channels: usize) -> Vec<f64> {
    let mut db = vec![0.0; channels];
    for row in dy.chunks_exact(channels) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    db
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; g.rows() * g.out_c];
    if g.is_pointwise() {
        gemm(g.rows(), g.in_c, g.out_c, MatRef::rows(x, g.in_c), MatRef::rows(w, g.out_c), 0.0, &mut out, g.out_c);
    } else if g.groups == 1 {
        let cols = im2col(g, x);
        gemm(g.rows(), g.patch_len(), g.out_c, MatRef::rows(&cols, g.patch_len()), MatRef::rows(w, g.out_c), 0.0, &mut out, g.out_c);
    } else if g.is_depthwise() {
        depthwise_forward(g, x, w, &mut out);
    } else {
        grouped_forward(g, x, w, &mut out);
    }
    if let Some(b) = bias {
        add_bias(&mut out, b);
    }
    out
}

/// Gradients `(dx, dw, db)` of a convolution given the output gradient.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    with_bias: bool,
) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    if g.is_pointwise() {
        gemm(g.rows(), g.out_c, g.in_c, MatRef::rows(dy, g.out_c), MatRef::transposed(w, g.out_c), 0.0, &mut dx, g.in_c);
        gemm(g.in_c, g.rows(), g.out_c, MatRef::transposed(x, g.in_c), MatRef::rows(dy, g.out_c), 0.0, &mut dw, g.out_c);
    } else if g.groups == 1 {
        let k = g.patch_len();
        let cols = im2col(g, x);
        gemm(k, g.rows(), g.out_c, MatRef::transposed(&cols, k), MatRef::rows(dy, g.out_c), 0.0, &mut dw, g.out_c);
        let mut dcols = cols;
        gemm(g.rows(), g.out_c, k, MatRef::rows(dy, g.out_c), MatRef::transposed(w, g.out_c), 0.0, &mut dcols, k);
        col2im(g, &dcols, &mut dx);
    } else if g.is_depthwise() {
        depthwise_backward(g, x, w, dy, &mut dx, &mut dw);
    } else {
        grouped_backward(g, x, w, dy, &mut dx, &mut dw);
    }
    let db = with_bias.then(|| bias_grad(dy, g.out_c));
    (dx, dw, db)
}

fn depthwise_forward(g: &ConvGeom, x: &[f64], w: &[f64], out: &mut [f64]) {
    let c = g.in_c;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o = ((b * g.out_h + oy) * g.out_w + ox) * c;
                let acc = &mut out[o..o + c];
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.pad_top, g.in_h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src(ox, kx, g.pad_left, g.in_w) else { continue };
                        let xi = ((b * g.in_h + iy) * g.in_w + ix) * c;
                        let wi = (ky * g.kw + kx) * c;
                        for ((a, xv), wv) in acc.iter_mut().zip(&x[xi..xi + c]).zip(&w[wi..wi + c]) {
                            *a += xv * wv;
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward(g: &ConvGeom, x: &[f64], w: &[f64], dy: &[f64], dx: &mut [f64], dw: &mut [f64]) {
    let c = g.in_c;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o = ((b * g.out_h + oy) * g.out_w + ox) * c;
                let gy = &dy[o..o + c];
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.pad_top, g.in_h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src(ox, kx, g.pad_left, g.in_w) else { continue };
                        let xi = ((b * g.in_h + iy) * g.in_w + ix) * c;
                        let wi = (ky * g.kw + kx) * c;
                        for ch in 0..c {
                            dx[xi + ch] += gy[ch] * w[wi + ch];
                            dw[wi + ch] += gy[ch] * x[xi + ch];
                        }
                    }
                }
            }
        }
    }
}

fn grouped_forward(g: &ConvGeom, x: &[f64], w: &[f64], out: &mut [f64]) {
    let cig = g.in_c / g.groups;
    let cog = g.out_c / g.groups;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o = ((b * g.out_h + oy) * g.out_w + ox) * g.out_c;
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.pad_top, g.in_h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src(ox, kx, g.pad_left, g.in_w) else { continue };
                        let xi = ((b * g.in_h + iy) * g.in_w + ix) * g.in_c;
                        for co in 0..g.out_c {
                            let grp = co / cog;
                            let mut acc = 0.0;
                            for ci in 0..cig {
                                let wv = w[((ky * g.kw + kx) * cig + ci) * g.out_c + co];
                                acc += x[xi + grp * cig + ci] * wv;
                            }
                            out[o + co] += acc;
                        }
                    }
                }
            }
        }
    }
}

fn grouped_backward(g: &ConvGeom, x: &[f64], w: &[f64], dy: &[f64], dx: &mut [f64], dw: &mut [f64]) {
    let cig = g.in_c / g.groups;
    let cog = g.out_c / g.groups;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o = ((b * g.out_h + oy) * g.out_w + ox) * g.out_c;
                for ky in 0..g.kh {
                    let Some(iy) = g.src(oy, ky, g.pad_top, g.in_h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.src(ox, kx, g.pad_left, g.in_w) else { continue };
                        let xi = ((b * g.in_h + iy) * g.in_w + ix) * g.in_c;
                        for co in 0..g.out_c {
                            let grp = co / cog;
                            let gy = dy[o + co];
                            for ci in 0..cig {
                                let wi = ((ky * g.kw + kx) * cig + ci) * g.out_c + co;
                                dx[xi + grp * cig + ci] += gy * w[wi];
                                dw[wi] += gy * x[xi + grp * cig + ci];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Geometry of a transposed convolution: output extent `(in - 1) * stride + kernel`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransposedGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl TransposedGeom {
    pub fn new(input: (usize, usize, usize, usize), kernel: (usize, usize), stride: usize, out_c: usize) -> Result<Self> {
        let (batch, in_h, in_w, in_c) = input;
        if stride < 2 {
            return Err(config_err!("transposed convolution stride must be at least 2, got {}", stride));
        }
        if kernel.0 < 1 || kernel.1 < 1 {
            return Err(config_err!("kernel size must be positive"));
        }
        Ok(Self {
            batch,
            in_h,
            in_w,
            in_c,
            out_h: (in_h - 1) * stride + kernel.0,
            out_w: (in_w - 1) * stride + kernel.1,
            out_c,
            kh: kernel.0,
            kw: kernel.1,
            stride,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_h, self.out_w, self.out_c]
    }

    fn rows(&self) -> usize {
        self.batch * self.in_h * self.in_w
    }

    fn taps(&self) -> usize {
        self.kh * self.kw * self.out_c
    }

    /// Calls `f(tmp_offset, out_offset)` for every (input pixel, kernel tap) pair.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        for b in 0..self.batch {
            for iy in 0..self.in_h {
                for ix in 0..self.in_w {
                    let row = ((b * self.in_h + iy) * self.in_w + ix) * self.taps();
                    for ky in 0..self.kh {
                        let oy = iy * self.stride + ky;
                        for kx in 0..self.kw {
                            let ox = ix * self.stride + kx;
                            let dst = ((b * self.out_h + oy) * self.out_w + ox) * self.out_c;
                            f(row + (ky * self.kw + kx) * self.out_c, dst);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_transpose2d_forward(g: &TransposedGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let taps = g.taps();
    let mut tmp = vec![0.0; g.rows() * taps];
    gemm(g.rows(), g.in_c, taps, MatRef::rows(x, g.in_c), MatRef::rows(w, taps), 0.0, &mut tmp, taps);
    let mut out = vec![0.0; g.batch * g.out_h * g.out_w * g.out_c];
    let oc = g.out_c;
    g.for_each_tap(|src, dst| {
        for (o, t) in out[dst..dst + oc].iter_mut().zip(&tmp[src..src + oc]) {
            *o += t;
        }
    });
    if let Some(b) = bias {
        add_bias(&mut out, b);
    }
    out
}

pub(crate) fn conv_transpose2d_backward(
    g: &TransposedGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    with_bias: bool,
) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let taps = g.taps();
    let oc = g.out_c;
    let mut dtmp = vec![0.0; g.rows() * taps];
    g.for_each_tap(|src, dst| {
        dtmp[src..src + oc].copy_from_slice(&dy[dst..dst + oc]);
    });
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    gemm(g.rows(), taps, g.in_c, MatRef::rows(&dtmp, taps), MatRef::transposed(w, taps), 0.0, &mut dx, g.in_c);
    gemm(g.in_c, g.rows(), taps, MatRef::transposed(x, g.in_c), MatRef::rows(&dtmp, taps), 0.0, &mut dw, taps);
    let db = with_bias.then(|| bias_grad(dy, g.out_c));
    (dx, dw, db)
}
