//! Multi-head scaled dot-product attention over token matrices `(batch, tokens, dim)`.

use alloc::vec;
use alloc::vec::Vec;

use super::gemm::{gemm, MatRef};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnGeom {
    pub batch: usize,
    pub q_tokens: usize,
    pub kv_tokens: usize,
    pub dim: usize,
    pub heads: usize,
}

impl AttnGeom {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn scale(&self) -> f64 {
        1.0 / libm::sqrt(self.head_dim() as f64)
    }

    fn probs_len(&self) -> usize {
        self.q_tokens * self.kv_tokens
    }
}

/// Row-wise numerically stable softmax in place.
pub(crate) fn softmax_rows(data: &mut [f64], cols: usize) {
    for row in data.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - max);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Returns `(output, probabilities)`; probabilities are laid out `[batch, head, q, kv]`.
pub(crate) fn attention_forward(g: &AttnGeom, q: &[f64], k: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let dk = g.head_dim();
    let np = g.probs_len();
    let mut out = vec![0.0; g.batch * g.q_tokens * g.dim];
    let mut probs = vec![0.0; g.batch * g.heads * np];
    for b in 0..g.batch {
        let qb = &q[b * g.q_tokens * g.dim..];
        let kb = &k[b * g.kv_tokens * g.dim..];
        let vb = &v[b * g.kv_tokens * g.dim..];
        for h in 0..g.heads {
            let p = &mut probs[(b * g.heads + h) * np..(b * g.heads + h + 1) * np];
            gemm(
                g.q_tokens,
                dk,
                g.kv_tokens,
                MatRef::strided(&qb[h * dk..], g.dim, 1),
                MatRef::strided(&kb[h * dk..], 1, g.dim),
                0.0,
                p,
                g.kv_tokens,
            );
            let scale = g.scale();
            for s in p.iter_mut() {
                *s *= scale;
            }
            softmax_rows(p, g.kv_tokens);
            let o = &mut out[b * g.q_tokens * g.dim + h * dk..];
            gemm(
                g.q_tokens,
                g.kv_tokens,
                dk,
                MatRef::rows(p, g.kv_tokens),
                MatRef::strided(&vb[h * dk..], g.dim, 1),
                0.0,
                o,
                g.dim,
            );
        }
    }
    (out, probs)
}

/// Gradients `(dq, dk, dv)`.
pub(crate) fn attention_backward(
    g: &AttnGeom,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dk = g.head_dim();
    let np = g.probs_len();
    let scale = g.scale();
    let mut dq = vec![0.0; q.len()];
    let mut dkey = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut ds = vec![0.0; np];
    for b in 0..g.batch {
        let qoff = b * g.q_tokens * g.dim;
        let koff = b * g.kv_tokens * g.dim;
        for h in 0..g.heads {
            let p = &probs[(b * g.heads + h) * np..(b * g.heads + h + 1) * np];
            let dob = MatRef::strided(&dout[qoff + h * dk..], g.dim, 1);
            // dV = P^T dO
            gemm(
                g.kv_tokens,
                g.q_tokens,
                dk,
                MatRef::transposed(p, g.kv_tokens),
                dob,
                1.0,
                &mut dv[koff + h * dk..],
                g.dim,
            );
            // dP = dO V^T
            gemm(
                g.q_tokens,
                dk,
                g.kv_tokens,
                dob,
                MatRef::strided(&v[koff + h * dk..], 1, g.dim),
                0.0,
                &mut ds,
                g.kv_tokens,
            );
            // dS = P * (dP - rowsum(dP * P)), folded with the logit scale.
            for (drow, prow) in ds.chunks_exact_mut(g.kv_tokens).zip(p.chunks_exact(g.kv_tokens)) {
                let dot: f64 = drow.iter().zip(prow).map(|(d, p)| d * p).sum();
                for (d, p) in drow.iter_mut().zip(prow) {
                    *d = p * (*d - dot) * scale;
                }
            }
            gemm(
                g.q_tokens,
                g.kv_tokens,
                dk,
                MatRef::rows(&ds, g.kv_tokens),
                MatRef::strided(&k[koff + h * dk..], g.dim, 1),
                1.0,
                &mut dq[qoff + h * dk..],
                g.dim,
            );
            gemm(
                g.kv_tokens,
                g.q_tokens,
                dk,
                MatRef::transposed(&ds, g.kv_tokens),
                MatRef::strided(&q[qoff + h * dk..], g.dim, 1),
                1.0,
                &mut dkey[koff + h * dk..],
                g.dim,
            );
        }
    }
    (dq, dkey, dv)
}
