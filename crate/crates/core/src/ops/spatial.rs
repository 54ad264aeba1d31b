//! Parameter-free spatial resampling: max pooling, nearest upsampling, global average
//! pooling and bilinear resizing.

use alloc::vec;
use alloc::vec::Vec;

type Dims = (usize, usize, usize, usize);

/// Non-overlapping `s × s` max pooling. Returns the pooled map and, per output element, the
/// flat index of the winning input element (first maximum in row-major window order).
pub(crate) fn max_pool_forward(x: &[f64], dims: Dims, s: usize) -> (Vec<f64>, Vec<usize>) {
    let (b, h, w, c) = dims;
    let (oh, ow) = (h / s, w / s);
    let mut out = vec![f64::NEG_INFINITY; b * oh * ow * c];
    let mut arg = vec![0usize; out.len()];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = ((bi * oh + oy) * ow + ox) * c;
                for dy in 0..s {
                    for dx in 0..s {
                        let i = ((bi * h + oy * s + dy) * w + ox * s + dx) * c;
                        for ch in 0..c {
                            if x[i + ch] > out[o + ch] {
                                out[o + ch] = x[i + ch];
                                arg[o + ch] = i + ch;
                            }
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn max_pool_backward(arg: &[usize], input_len: usize, dy: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (&i, g) in arg.iter().zip(dy) {
        dx[i] += g;
    }
    dx
}

/// Nearest-neighbour upsampling by an integer factor.
pub(crate) fn upsample_forward(x: &[f64], dims: Dims, s: usize) -> Vec<f64> {
    let (b, h, w, c) = dims;
    let (oh, ow) = (h * s, w * s);
    let mut out = vec![0.0; b * oh * ow * c];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = ((bi * oh + oy) * ow + ox) * c;
                let i = ((bi * h + oy / s) * w + ox / s) * c;
                out[o..o + c].copy_from_slice(&x[i..i + c]);
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(dims: Dims, s: usize, dy: &[f64]) -> Vec<f64> {
    let (b, h, w, c) = dims;
    let (oh, ow) = (h * s, w * s);
    let mut dx = vec![0.0; b * h * w * c];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = ((bi * oh + oy) * ow + ox) * c;
                let i = ((bi * h + oy / s) * w + ox / s) * c;
                for ch in 0..c {
                    dx[i + ch] += dy[o + ch];
                }
            }
        }
    }
    dx
}

/// Mean over all spatial positions: `(B, H, W, C) -> (B, C)`.
pub(crate) fn global_avg_pool_forward(x: &[f64], dims: Dims) -> Vec<f64> {
    let (b, h, w, c) = dims;
    let hw = h * w;
    let mut out = vec![0.0; b * c];
    for bi in 0..b {
        let ob = &mut out[bi * c..(bi + 1) * c];
        for px in x[bi * hw * c..(bi + 1) * hw * c].chunks_exact(c) {
            for (o, v) in ob.iter_mut().zip(px) {
                *o += v;
            }
        }
        for o in ob.iter_mut() {
            *o /= hw as f64;
        }
    }
    out
}

pub(crate) fn global_avg_pool_backward(dims: Dims, dy: &[f64]) -> Vec<f64> {
    let (b, h, w, c) = dims;
    let hw = h * w;
    let mut dx = vec![0.0; b * hw * c];
    for bi in 0..b {
        let g = &dy[bi * c..(bi + 1) * c];
        for px in dx[bi * hw * c..(bi + 1) * hw * c].chunks_exact_mut(c) {
            for (d, v) in px.iter_mut().zip(g) {
                *d = v / hw as f64;
            }
        }
    }
    dx
}

/// Source taps `(i0, i1, frac)` for resizing an axis of length `src` to `dst` with half-pixel
/// centres (`align_corners = false`), clamping at the borders.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = libm::floor(pos) as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

pub(crate) fn bilinear_forward(x: &[f64], dims: Dims, out_h: usize, out_w: usize) -> Vec<f64> {
    let (b, h, w, c) = dims;
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = vec![0.0; b * out_h * out_w * c];
    for bi in 0..b {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let o = ((bi * out_h + oy) * out_w + ox) * c;
                let corners = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x1, (1.0 - fy) * fx),
                    (y1, x0, fy * (1.0 - fx)),
                    (y1, x1, fy * fx),
                ];
                for (yy, xx, wt) in corners {
                    let i = ((bi * h + yy) * w + xx) * c;
                    for ch in 0..c {
                        out[o + ch] += wt * x[i + ch];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward(dims: Dims, out_h: usize, out_w: usize, dy: &[f64]) -> Vec<f64> {
    let (b, h, w, c) = dims;
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut dx = vec![0.0; b * h * w * c];
    for bi in 0..b {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let o = ((bi * out_h + oy) * out_w + ox) * c;
                let corners = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x1, (1.0 - fy) * fx),
                    (y1, x0, fy * (1.0 - fx)),
                    (y1, x1, fy * fx),
                ];
                for (yy, xx, wt) in corners {
                    let i = ((bi * h + yy) * w + xx) * c;
                    for ch in 0..c {
                        dx[i + ch] += wt * dy[o + ch];
                    }
                }
            }
        }
    }
    dx
}
