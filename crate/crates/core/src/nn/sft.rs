//! Spatial-frequency hybrid transformer layer.
//!
//! ```text
//! n = LN(x)
//! y = x + PW(SCA(n) + CFIA(n))
//! out = y + MFFN(LN(y))
//! ```

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::frequency::laplacian_split_graph;
use crate::graph::{Graph, Var};
use crate::nn::layers::{sum_all, Conv2d, LayerNorm};
use crate::ops::conv::ConvSpec;
use crate::params::ParamBuilder;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftConfig {
    pub heads: usize,
    /// Requested Laplacian pool stride `s`.
    pub pool_stride: usize,
    pub sca_dilations: Vec<usize>,
    pub mffn_kernels: Vec<usize>,
    pub mffn_hidden_ratio: f64,
}

impl SftConfig {
    /// Defaults for a stage of the given width: `max(1, width / 32)` heads, stride 2,
    /// dilations `[1, 2]`, kernels `[3, 5]`, hidden ratio 2.
    pub fn for_width(width: usize) -> Self {
        Self {
            heads: (width / 32).max(1),
            pool_stride: 2,
            sca_dilations: alloc::vec![1, 2],
            mffn_kernels: alloc::vec![3, 5],
            mffn_hidden_ratio: 2.0,
        }
    }

    pub fn hidden_width(&self, width: usize) -> usize {
        libm::round(self.mffn_hidden_ratio * width as f64).max(1.0) as usize
    }

    pub fn validate(&self, width: usize) -> Result<()> {
        if self.heads == 0 || !width.is_multiple_of(self.heads) {
            return Err(config_err!("width {} is not divisible by {} heads", width, self.heads));
        }
        if self.pool_stride < 2 {
            return Err(config_err!("pool_stride must be at least 2, got {}", self.pool_stride));
        }
        if self.sca_dilations.is_empty() || self.sca_dilations.contains(&0) {
            return Err(config_err!("sca_dilations must be a non-empty list of positive integers"));
        }
        if self.mffn_kernels.is_empty() || self.mffn_kernels.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(config_err!("mffn_kernels must be a non-empty list of odd positive integers"));
        }
        if !(self.mffn_hidden_ratio > 0.0 && self.mffn_hidden_ratio.is_finite()) {
            return Err(config_err!("mffn_hidden_ratio must be positive, got {}", self.mffn_hidden_ratio));
        }
        Ok(())
    }
}

/// Pool stride actually used for an `h × w` stage: the requested stride when it divides
/// both extents, otherwise the smallest divisor ≥ 2 of `gcd(h, w)`, otherwise 1 (no split).
pub fn effective_pool_stride(h: usize, w: usize, requested: usize) -> usize {
    if h.is_multiple_of(requested) && w.is_multiple_of(requested) {
        return requested;
    }
    let g = gcd(h, w);
    (2..=g).find(|d| g.is_multiple_of(*d)).unwrap_or(1)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Spatial context aggregator: parallel 3×3 depthwise convolutions at several dilations,
/// concatenated and fused back to `C` channels by a pointwise convolution.
#[derive(Clone, Debug)]
pub struct Sca {
    pub branches: Vec<Conv2d>,
    pub fuse: Conv2d,
}

impl Sca {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize, dilations: &[usize]) -> Self {
        let branches = dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                Conv2d::new(
                    &mut pb.sub(&alloc::format!("dw{i}")),
                    channels,
                    channels,
                    ConvSpec::depthwise(3, channels, d),
                )
            })
            .collect();
        let fuse = Conv2d::new(&mut pb.sub("fuse"), dilations.len() * channels, channels, ConvSpec::pointwise());
        Self { branches, fuse }
    }

    pub fn num_params(channels: usize, branches: usize) -> usize {
        branches * Conv2d::num_params(channels, channels, &ConvSpec::depthwise(3, channels, 1))
            + Conv2d::num_params(branches * channels, channels, &ConvSpec::pointwise())
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let outs = self.branches.iter().map(|b| b.forward(g, x)).collect::<Result<Vec<_>>>()?;
        let cat = g.concat(&outs)?;
        self.fuse.forward(g, cat)
    }
}

/// Cross-frequency interaction attention.
///
/// Queries come from the input itself; keys and values come from the high band (one token per
/// input pixel) and from the low band (one token per pooled pixel). The two attention results
/// are summed and projected back to `C` channels.
#[derive(Clone, Debug)]
pub struct Cfia {
    pub q_proj: Conv2d,
    pub k_high: Conv2d,
    pub v_high: Conv2d,
    pub k_low: Conv2d,
    pub v_low: Conv2d,
    pub out_proj: Conv2d,
    pub heads: usize,
    pub pool_stride: usize,
}

/// Intermediate values of one CFIA evaluation.
#[derive(Clone, Copy, Debug)]
pub struct CfiaVars {
    pub output: Var,
    pub low: Var,
    pub high: Var,
    pub attn_high: Var,
    pub attn_low: Var,
}

impl Cfia {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize, heads: usize, pool_stride: usize) -> Self {
        let spec = ConvSpec::pointwise();
        let mut proj = |name: &str| Conv2d::new(&mut pb.sub(name), channels, channels, spec);
        let q_proj = proj("q_proj");
        let v_high = proj("v_high");
        let v_low = proj("v_low");
        let out_proj = proj("out_proj");
        // A key bias only shifts every score of a query row equally, which softmax ignores.
        let mut key = |name: &str| Conv2d::unbiased(&mut pb.sub(name), channels, channels, spec);
        Self {
            q_proj,
            k_high: key("k_high"),
            v_high,
            k_low: key("k_low"),
            v_low,
            out_proj,
            heads,
            pool_stride,
        }
    }

    pub fn num_params(channels: usize) -> usize {
        6 * channels * channels + 4 * channels
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        Ok(self.forward_detailed(g, x, self.pool_stride)?.output)
    }

    /// Evaluates with an explicit pool stride. Stride 1 is the degenerate split used by stages
    /// whose extent cannot be pooled; any other stride must divide both spatial extents.
    pub fn forward_detailed(&self, g: &mut Graph<'_>, x: Var, stride: usize) -> Result<CfiaVars> {
        let (b, h, w, c) = g.value(x).dims4()?;
        if self.heads == 0 || c % self.heads != 0 {
            return Err(config_err!("width {} is not divisible by {} heads", c, self.heads));
        }
        if stride != 1 && (stride < 2 || h % stride != 0 || w % stride != 0) {
            return Err(Error::Indivisible {
                height: h,
                width: w,
                factor: stride,
            });
        }
        let (low, high) = laplacian_split_graph(g, x, stride)?;
        let low_tokens = (h / stride) * (w / stride);

        let q = self.q_proj.forward(g, x)?;
        let q = g.reshape(q, &[b, h * w, c])?;

        let kh = self.k_high.forward(g, high)?;
        let kh = g.reshape(kh, &[b, h * w, c])?;
        let vh = self.v_high.forward(g, high)?;
        let vh = g.reshape(vh, &[b, h * w, c])?;
        let attn_high = g.attention(q, kh, vh, self.heads)?;

        let kl = self.k_low.forward(g, low)?;
        let kl = g.reshape(kl, &[b, low_tokens, c])?;
        let vl = self.v_low.forward(g, low)?;
        let vl = g.reshape(vl, &[b, low_tokens, c])?;
        let attn_low = g.attention(q, kl, vl, self.heads)?;

        let merged = g.add(attn_high, attn_low)?;
        let merged = g.reshape(merged, &[b, h, w, c])?;
        let output = self.out_proj.forward(g, merged)?;
        Ok(CfiaVars {
            output,
            low,
            high,
            attn_high,
            attn_low,
        })
    }
}

/// Multi-scale feed-forward network: pointwise `C → hidden`, parallel depthwise convolutions
/// plus an identity path summed, GELU, pointwise `hidden → C`.
#[derive(Clone, Debug)]
pub struct Mffn {
    pub expand: Conv2d,
    pub branches: Vec<Conv2d>,
    pub project: Conv2d,
}

impl Mffn {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize, hidden: usize, kernels: &[usize]) -> Self {
        let expand = Conv2d::new(&mut pb.sub("expand"), channels, hidden, ConvSpec::pointwise());
        let branches = kernels
            .iter()
            .map(|&k| Conv2d::new(&mut pb.sub(&alloc::format!("dw{k}")), hidden, hidden, ConvSpec::depthwise(k, hidden, 1)))
            .collect();
        let project = Conv2d::residual(&mut pb.sub("project"), hidden, channels, ConvSpec::pointwise());
        Self {
            expand,
            branches,
            project,
        }
    }

    pub fn num_params(channels: usize, hidden: usize, kernels: &[usize]) -> usize {
        Conv2d::num_params(channels, hidden, &ConvSpec::pointwise())
            + kernels
                .iter()
                .map(|&k| Conv2d::num_params(hidden, hidden, &ConvSpec::depthwise(k, hidden, 1)))
                .sum::<usize>()
            + Conv2d::num_params(hidden, channels, &ConvSpec::pointwise())
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.expand.forward(g, x)?;
        let mut parts = alloc::vec![h];
        for b in &self.branches {
            parts.push(b.forward(g, h)?);
        }
        let s = sum_all(g, &parts)?;
        let a = g.gelu(s);
        self.project.forward(g, a)
    }
}

#[derive(Clone, Debug)]
pub struct SftLayer {
    pub norm1: LayerNorm,
    pub sca: Sca,
    pub cfia: Cfia,
    pub merge: Conv2d,
    pub norm2: LayerNorm,
    pub mffn: Mffn,
}

impl SftLayer {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize, cfg: &SftConfig) -> Self {
        Self {
            norm1: LayerNorm::new(&mut pb.sub("norm1"), channels),
            sca: Sca::new(&mut pb.sub("sca"), channels, &cfg.sca_dilations),
            cfia: Cfia::new(&mut pb.sub("cfia"), channels, cfg.heads, cfg.pool_stride),
            merge: Conv2d::residual(&mut pb.sub("merge"), channels, channels, ConvSpec::pointwise()),
            norm2: LayerNorm::new(&mut pb.sub("norm2"), channels),
            mffn: Mffn::new(&mut pb.sub("mffn"), channels, cfg.hidden_width(channels), &cfg.mffn_kernels),
        }
    }

    pub fn num_params(channels: usize, cfg: &SftConfig) -> usize {
        2 * LayerNorm::num_params(channels)
            + Sca::num_params(channels, cfg.sca_dilations.len())
            + Cfia::num_params(channels)
            + Conv2d::num_params(channels, channels, &ConvSpec::pointwise())
            + Mffn::num_params(channels, cfg.hidden_width(channels), &cfg.mffn_kernels)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        self.forward_with_stride(g, x, self.cfia.pool_stride)
    }

    pub fn forward_with_stride(&self, g: &mut Graph<'_>, x: Var, stride: usize) -> Result<Var> {
        let n = self.norm1.forward(g, x)?;
        let spatial = self.sca.forward(g, n)?;
        let freq = self.cfia.forward_detailed(g, n, stride)?.output;
        let both = g.add(spatial, freq)?;
        let merged = self.merge.forward(g, both)?;
        let y = g.add(x, merged)?;
        let n2 = self.norm2.forward(g, y)?;
        let f = self.mffn.forward(g, n2)?;
        g.add(y, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn effective_stride_falls_back_to_divisors() {
        assert_eq!(effective_pool_stride(16, 16, 2), 2);
        assert_eq!(effective_pool_stride(3, 3, 2), 3);
        assert_eq!(effective_pool_stride(6, 9, 2), 3);
        assert_eq!(effective_pool_stride(1, 1, 2), 1);
        assert_eq!(effective_pool_stride(8, 8, 4), 4);
        assert_eq!(effective_pool_stride(6, 6, 4), 2);
    }

    #[test]
    fn config_validation() {
        assert!(SftConfig::for_width(64).validate(64).is_ok());
        let mut bad = SftConfig::for_width(64);
        bad.heads = 3;
        assert!(bad.validate(64).is_err());
        let mut bad = SftConfig::for_width(64);
        bad.mffn_kernels = alloc::vec![4];
        assert!(bad.validate(64).is_err());
        assert_eq!(SftConfig::for_width(16).heads, 1);
        assert_eq!(SftConfig::for_width(256).heads, 8);
    }
}
