//! Independent reference implementations used by the integration and acceptance tests.
//! Everything here is written as plain nested loops over `(b, y, x, c)` indices and shares
//! no code with the crate's kernels.
#![allow(dead_code)]

use roadseg_core::Tensor;

pub fn idx(shape: &[usize], b: usize, y: usize, x: usize, c: usize) -> usize {
    ((b * shape[1] + y) * shape[2] + x) * shape[3] + c
}

/// Direct convolution with zero padding. `same` pads so that `out = ceil(in / stride)`,
/// putting the smaller half of the padding before the data.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&[f64]>,
    stride: usize,
    dilation: usize,
    groups: usize,
    same: bool,
) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let (b, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3]);
    let (kh, kw, cpg, cout) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(cpg * groups, cin);
    let ext = |k: usize| (k - 1) * dilation + 1;
    let (oh, ow, pt, pl) = if same {
        let oh = h.div_ceil(stride);
        let ow = wd.div_ceil(stride);
        let ph = ((oh - 1) * stride + ext(kh)).saturating_sub(h);
        let pw = ((ow - 1) * stride + ext(kw)).saturating_sub(wd);
        (oh, ow, ph / 2, pw / 2)
    } else {
        ((h - ext(kh)) / stride + 1, (wd - ext(kw)) / stride + 1, 0, 0)
    };
    let opg = cout / groups;
    let mut out = Tensor::zeros([b, oh, ow, cout]);
    let os = out.shape().to_vec();
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let grp = co / opg;
                    let mut acc = bias.map_or(0.0, |bb| bb[co]);
                    for i in 0..kh {
                        for j in 0..kw {
                            let iy = (oy * stride + i * dilation) as isize - pt as isize;
                            let ix = (ox * stride + j * dilation) as isize - pl as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            for ci in 0..cpg {
                                let xv = x.data()[idx(xs, bi, iy as usize, ix as usize, grp * cpg + ci)];
                                let wv = w.data()[((i * kw + j) * cpg + ci) * cout + co];
                                acc += xv * wv;
                            }
                        }
                    }
                    out.data_mut()[idx(&os, bi, oy, ox, co)] = acc;
                }
            }
        }
    }
    out
}

/// Transposed convolution as an explicit scatter; weights `[Cin, k, k, Cout]`, stride = `k`.
pub fn conv_transpose2d(x: &Tensor, w: &Tensor, bias: Option<&[f64]>, stride: usize) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let (b, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3]);
    let (k, cout) = (ws[1], ws[3]);
    let (oh, ow) = ((h - 1) * stride + k, (wd - 1) * stride + k);
    let mut out = Tensor::zeros([b, oh, ow, cout]);
    let os = out.shape().to_vec();
    for bi in 0..b {
        for y in 0..oh {
            for xx in 0..ow {
                for co in 0..cout {
                    out.data_mut()[idx(&os, bi, y, xx, co)] = bias.map_or(0.0, |bb| bb[co]);
                }
            }
        }
        for y in 0..h {
            for xx in 0..wd {
                for ci in 0..cin {
                    let v = x.data()[idx(xs, bi, y, xx, ci)];
                    for i in 0..k {
                        for j in 0..k {
                            for co in 0..cout {
                                let wv = w.data()[((ci * k + i) * k + j) * cout + co];
                                out.data_mut()[idx(&os, bi, y * stride + i, xx * stride + j, co)] += v * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Normalizes each pixel over its channels with the biased variance.
pub fn layer_norm(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Tensor {
    let c = *x.shape().last().unwrap();
    let mut out = x.clone();
    for (row, o) in x.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        for ch in 0..c {
            o[ch] = (row[ch] - mean) / (var + eps).sqrt() * gamma[ch] + beta[ch];
        }
    }
    out
}

/// `tokens[b][n][:] · w + bias` for a pointwise projection given as a `[1, 1, Cin, Cout]`
/// weight.
pub fn project_tokens(tokens: &[Vec<Vec<f64>>], w: &Tensor, bias: Option<&[f64]>) -> Vec<Vec<Vec<f64>>> {
    let (cin, cout) = (w.shape()[2], w.shape()[3]);
    tokens
        .iter()
        .map(|item| {
            item.iter()
                .map(|t| {
                    (0..cout)
                        .map(|co| bias.map_or(0.0, |b| b[co]) + (0..cin).map(|ci| t[ci] * w.data()[ci * cout + co]).sum::<f64>())
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Per-pixel token lists `[b][y * W + x][c]`.
pub fn to_tokens(x: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let s = x.shape();
    (0..s[0])
        .map(|b| {
            (0..s[1] * s[2])
                .map(|n| (0..s[3]).map(|c| x.data()[idx(s, b, n / s[2], n % s[2], c)]).collect())
                .collect()
        })
        .collect()
}

pub fn from_tokens(tokens: &[Vec<Vec<f64>>], h: usize, w: usize) -> Tensor {
    let c = tokens[0][0].len();
    let data: Vec<f64> = tokens.iter().flatten().flatten().copied().collect();
    Tensor::new([tokens.len(), h, w, c], data).unwrap()
}

/// Multi-head attention one query token at a time. Returns the output tokens and, per
/// `[b][head][query]`, the softmax row.
pub fn attention(
    q: &[Vec<Vec<f64>>],
    k: &[Vec<Vec<f64>>],
    v: &[Vec<Vec<f64>>],
    heads: usize,
) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<Vec<f64>>>>) {
    let d = q[0][0].len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![vec![vec![0.0; d]; q[0].len()]; q.len()];
    let mut rows = vec![vec![Vec::new(); heads]; q.len()];
    for b in 0..q.len() {
        for hd in 0..heads {
            let r = hd * dh..(hd + 1) * dh;
            for (qi, qt) in q[b].iter().enumerate() {
                let scores: Vec<f64> = k[b]
                    .iter()
                    .map(|kt| r.clone().map(|c| qt[c] * kt[c]).sum::<f64>() * scale)
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                let p: Vec<f64> = e.iter().map(|x| x / z).collect();
                for c in r.clone() {
                    out[b][qi][c] = p.iter().zip(&v[b]).map(|(pj, vt)| pj * vt[c]).sum();
                }
                rows[b][hd].push(p);
            }
        }
    }
    (out, rows)
}

/// Stride-`s` max pool by scanning each window.
pub fn max_pool(x: &Tensor, s: usize) -> Tensor {
    let xs = x.shape();
    let mut out = Tensor::zeros([xs[0], xs[1] / s, xs[2] / s, xs[3]]);
    let os = out.shape().to_vec();
    for b in 0..os[0] {
        for y in 0..os[1] {
            for xx in 0..os[2] {
                for c in 0..os[3] {
                    let mut m = f64::NEG_INFINITY;
                    for i in 0..s {
                        for j in 0..s {
                            m = m.max(x.data()[idx(xs, b, y * s + i, xx * s + j, c)]);
                        }
                    }
                    out.data_mut()[idx(&os, b, y, xx, c)] = m;
                }
            }
        }
    }
    out
}

/// Every pixel copies its `(y / s, x / s)` source.
pub fn nearest_up(x: &Tensor, s: usize) -> Tensor {
    let xs = x.shape();
    let mut out = Tensor::zeros([xs[0], xs[1] * s, xs[2] * s, xs[3]]);
    let os = out.shape().to_vec();
    for b in 0..os[0] {
        for y in 0..os[1] {
            for xx in 0..os[2] {
                for c in 0..os[3] {
                    out.data_mut()[idx(&os, b, y, xx, c)] = x.data()[idx(xs, b, y / s, xx / s, c)];
                }
            }
        }
    }
    out
}

/// Weights of one cross-frequency attention module, as plain tensors.
pub struct CfiaWeights<'a> {
    pub q: (&'a Tensor, &'a [f64]),
    pub k_high: &'a Tensor,
    pub v_high: (&'a Tensor, &'a [f64]),
    pub k_low: &'a Tensor,
    pub v_low: (&'a Tensor, &'a [f64]),
    pub out: (&'a Tensor, &'a [f64]),
}

/// Cross-frequency attention evaluated token by token: queries from `x`, keys/values from
/// the high band and the low band, the two attention outputs summed, then projected.
pub fn cfia(x: &Tensor, wt: &CfiaWeights<'_>, heads: usize, s: usize) -> (Tensor, Vec<Vec<Vec<Vec<f64>>>>) {
    let xs = x.shape();
    let low = max_pool(x, s);
    let up = nearest_up(&low, s);
    let high = Tensor::new(xs, up.data().iter().zip(x.data()).map(|(u, v)| u - v).collect()).unwrap();
    let q = project_tokens(&to_tokens(x), wt.q.0, Some(wt.q.1));
    let kh = project_tokens(&to_tokens(&high), wt.k_high, None);
    let vh = project_tokens(&to_tokens(&high), wt.v_high.0, Some(wt.v_high.1));
    let kl = project_tokens(&to_tokens(&low), wt.k_low, None);
    let vl = project_tokens(&to_tokens(&low), wt.v_low.0, Some(wt.v_low.1));
    let (ah, mut rows) = attention(&q, &kh, &vh, heads);
    let (al, rows_low) = attention(&q, &kl, &vl, heads);
    let summed: Vec<Vec<Vec<f64>>> = ah
        .iter()
        .zip(&al)
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u.iter().zip(v).map(|(p, q)| p + q).collect()).collect())
        .collect();
    let out = project_tokens(&summed, wt.out.0, Some(wt.out.1));
    for (r, l) in rows.iter_mut().zip(rows_low) {
        r.extend(l);
    }
    (from_tokens(&out, xs[1], xs[2]), rows)
}

/// Channel fusion, one step at a time: pooled descriptors, bottleneck with ReLU, sigmoid gates,
/// gated sum. Linear weights are `[in, out]`.
pub fn cffm(fc: &Tensor, ft: &Tensor, w1: &Tensor, b1: &[f64], w2: &Tensor, b2: &[f64]) -> Tensor {
    let s = fc.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let hidden = w1.shape()[1];
    let mut out = Tensor::zeros(s.to_vec());
    for bi in 0..b {
        let mut z = vec![0.0; 2 * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    z[ch] += fc.data()[idx(s, bi, y, x, ch)];
                    z[c + ch] += ft.data()[idx(s, bi, y, x, ch)];
                }
            }
        }
        for v in &mut z {
            *v /= (h * w) as f64;
        }
        let hid: Vec<f64> = (0..hidden)
            .map(|j| (b1[j] + (0..2 * c).map(|i| z[i] * w1.data()[i * hidden + j]).sum::<f64>()).max(0.0))
            .collect();
        let gate: Vec<f64> = (0..2 * c)
            .map(|j| {
                let l = b2[j] + (0..hidden).map(|i| hid[i] * w2.data()[i * 2 * c + j]).sum::<f64>();
                1.0 / (1.0 + (-l).exp())
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let i = idx(s, bi, y, x, ch);
                    out.data_mut()[i] = gate[ch] * fc.data()[i] + gate[c + ch] * ft.data()[i];
                }
            }
        }
    }
    out
}

/// `(tp, fp, fn, tn)` by visiting every pixel.
pub fn confusion(prob: &[f64], target: &[f64], threshold: f64) -> (u64, u64, u64, u64) {
    let mut c = (0, 0, 0, 0);
    for (&p, &t) in prob.iter().zip(target) {
        match (p >= threshold, t == 1.0) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, true) => c.2 += 1,
            (false, false) => c.3 += 1,
        }
    }
    c
}

/// Exact rational `(num, den)` of precision, recall, F1 (harmonic-mean form) and IoU, each
/// reduced to 0/1 when its denominator vanishes.
pub fn rational_metrics(tp: u64, fp: u64, fn_: u64) -> [(u128, u128); 4] {
    let frac = |n: u128, d: u128| if d == 0 { (0, 1) } else { (n, d) };
    let (tp, fp, fn_) = (tp as u128, fp as u128, fn_ as u128);
    let p = frac(tp, tp + fp);
    let r = frac(tp, tp + fn_);
    // 2PR / (P + R) with P = p.0/p.1, R = r.0/r.1.
    let f1 = if p.0 == 0 || r.0 == 0 {
        (0, 1)
    } else {
        (2 * p.0 * r.0, p.0 * r.1 + r.0 * p.1)
    };
    let iou = frac(tp, tp + fp + fn_);
    [p, r, f1, iou]
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Correctly rounded `num / den`: the fraction is reduced first so both parts convert to
/// `f64` exactly (for the magnitudes used in tests).
pub fn ratio(q: (u128, u128)) -> f64 {
    let g = gcd(q.0, q.1).max(1);
    let (n, d) = (q.0 / g, q.1 / g);
    assert!(n < 1 << 53 && d < 1 << 53);
    n as f64 / d as f64
}

/// Tile origins of a `grid × grid` split with square crops of side `side`.
pub fn grid_origins(grid: usize, side: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    for r in 0..grid {
        for c in 0..grid {
            v.push((r * side, c * side));
        }
    }
    v
}

/// Nearest-neighbour source index for half-pixel centres, computed in floating point.
pub fn nearest_source(o: usize, src: usize, dst: usize) -> usize {
    (((o as f64 + 0.5) * src as f64 / dst as f64).floor() as usize).min(src - 1)
}
