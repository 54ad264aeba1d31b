use alloc::vec;
use alloc::vec::Vec;

/// Per-row statistics saved by [`layer_norm_forward`].
#[derive(Clone, Debug)]
pub(crate) struct RowStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Normalizes each length-`c` row to zero mean and unit (population) variance, then applies
/// the per-channel affine `gamma * x̂ + beta`.
pub(crate) fn layer_norm_forward(x: &[f64], c: usize, gamma: &[f64], beta: &[f64], eps: f64) -> (Vec<f64>, RowStats) {
    let rows = x.len() / c;
    let mut out = vec![0.0; x.len()];
    let mut stats = RowStats {
        mean: Vec::with_capacity(rows),
        rstd: Vec::with_capacity(rows),
    };
    for (xr, yr) in x.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        let mean = xr.iter().sum::<f64>() / c as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rstd = 1.0 / libm::sqrt(var + eps);
        for i in 0..c {
            yr[i] = (xr[i] - mean) * rstd * gamma[i] + beta[i];
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    (out, stats)
}

pub(crate) fn layer_norm_backward(
    x: &[f64],
    c: usize,
    gamma: &[f64],
    stats: &RowStats,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut xhat = vec![0.0; c];
    let mut dxhat = vec![0.0; c];
    for (r, ((xr, gr), dxr)) in x.chunks_exact(c).zip(dy.chunks_exact(c)).zip(dx.chunks_exact_mut(c)).enumerate() {
        let (mean, rstd) = (stats.mean[r], stats.rstd[r]);
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for i in 0..c {
            xhat[i] = (xr[i] - mean) * rstd;
            dxhat[i] = gr[i] * gamma[i];
            dgamma[i] += gr[i] * xhat[i];
            dbeta[i] += gr[i];
            mean_d += dxhat[i];
            mean_dx += dxhat[i] * xhat[i];
        }
        mean_d /= c as f64;
        mean_dx /= c as f64;
        for i in 0..c {
            dxr[i] = rstd * (dxhat[i] - mean_d - xhat[i] * mean_dx);
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) const GRN_EPS: f64 = 1e-6;

/// Statistics of global response normalization for each batch item.
#[derive(Clone, Debug)]
pub(crate) struct GrnStats {
    /// Per `(batch, channel)` spatial L2 norm.
    pub norms: Vec<f64>,
    /// Per batch item `mean_c(norm) + eps`.
    pub denom: Vec<f64>,
}

/// `y = x + gamma * (x * n) + beta` with `n_c = ||x_c||_2 / (mean_c ||x_c||_2 + eps)`, where the
/// norm runs over all spatial positions of one batch item.
pub(crate) fn grn_forward(x: &[f64], dims: (usize, usize, usize, usize), gamma: &[f64], beta: &[f64]) -> (Vec<f64>, GrnStats) {
    let (b, h, w, c) = dims;
    let hw = h * w;
    let mut norms = vec![0.0; b * c];
    let mut denom = vec![0.0; b];
    for bi in 0..b {
        let nb = &mut norms[bi * c..(bi + 1) * c];
        for px in x[bi * hw * c..(bi + 1) * hw * c].chunks_exact(c) {
            for (n, v) in nb.iter_mut().zip(px) {
                *n += v * v;
            }
        }
        for n in nb.iter_mut() {
            *n = libm::sqrt(*n);
        }
        denom[bi] = nb.iter().sum::<f64>() / c as f64 + GRN_EPS;
    }
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        let base = bi * hw * c;
        for (px, ypx) in x[base..base + hw * c].chunks_exact(c).zip(out[base..base + hw * c].chunks_exact_mut(c)) {
            for i in 0..c {
                let n = norms[bi * c + i] / denom[bi];
                ypx[i] = px[i] + gamma[i] * px[i] * n + beta[i];
            }
        }
    }
    (out, GrnStats { norms, denom })
}

pub(crate) fn grn_backward(
    x: &[f64],
    dims: (usize, usize, usize, usize),
    gamma: &[f64],
    stats: &GrnStats,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (b, h, w, c) = dims;
    let hw = h * w;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut dn = vec![0.0; c];
    let mut dnorm = vec![0.0; c];
    for bi in 0..b {
        let base = bi * hw * c;
        let norms = &stats.norms[bi * c..(bi + 1) * c];
        let denom = stats.denom[bi];
        dn.iter_mut().for_each(|v| *v = 0.0);
        for (px, gpx) in x[base..base + hw * c].chunks_exact(c).zip(dy[base..base + hw * c].chunks_exact(c)) {
            for i in 0..c {
                let n = norms[i] / denom;
                dgamma[i] += gpx[i] * px[i] * n;
                dbeta[i] += gpx[i];
                dn[i] += gpx[i] * gamma[i] * px[i];
            }
        }
        let cross: f64 = dn.iter().zip(norms).map(|(d, g)| d * g).sum::<f64>() / (denom * denom * c as f64);
        for i in 0..c {
            dnorm[i] = dn[i] / denom - cross;
        }
        for ((px, gpx), dpx) in x[base..base + hw * c]
            .chunks_exact(c)
            .zip(dy[base..base + hw * c].chunks_exact(c))
            .zip(dx[base..base + hw * c].chunks_exact_mut(c))
        {
            for i in 0..c {
                let n = norms[i] / denom;
                let through_norm = if norms[i] > 0.0 { dnorm[i] * px[i] / norms[i] } else { 0.0 };
                dpx[i] = gpx[i] * (1.0 + gamma[i] * n) + through_norm;
            }
        }
    }
    (dx, dgamma, dbeta)
}
