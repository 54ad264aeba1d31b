//! Convolutional encoder branch: patchify stem, ConvNeXt-v2 blocks, and the downsampling
//! module shared by both branches at every stage boundary.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::layers::{Conv2d, LayerNorm};
use crate::ops::conv::ConvSpec;
use crate::params::{ParamBuilder, ParamId};

/// Input extents must be multiples of this so every stage and decoder level aligns.
pub const INPUT_MULTIPLE: usize = 32;

/// 4×4 stride-4 convolution followed by layer normalization.
#[derive(Clone, Debug)]
pub struct Stem {
    pub conv: Conv2d,
    pub norm: LayerNorm,
}

impl Stem {
    pub const STRIDE: usize = 4;

    pub fn new(pb: &mut ParamBuilder<'_>, in_channels: usize, width: usize) -> Self {
        Self {
            conv: Conv2d::new(&mut pb.sub("conv"), in_channels, width, ConvSpec::patchify(Self::STRIDE)),
            norm: LayerNorm::new(&mut pb.sub("norm"), width),
        }
    }

    pub fn num_params(in_channels: usize, width: usize) -> usize {
        Conv2d::num_params(in_channels, width, &ConvSpec::patchify(Self::STRIDE)) + LayerNorm::num_params(width)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (_, h, w, _) = g.value(x).dims4()?;
        if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 || h == 0 || w == 0 {
            return Err(Error::Indivisible {
                height: h,
                width: w,
                factor: INPUT_MULTIPLE,
            });
        }
        let y = self.conv.forward(g, x)?;
        self.norm.forward(g, y)
    }
}

/// Residual block: 7×7 depthwise conv → LN → pointwise ×4 expansion → GELU → GRN → pointwise
/// projection, added to the input.
#[derive(Clone, Debug)]
pub struct ConvNextBlock {
    pub dwconv: Conv2d,
    pub norm: LayerNorm,
    pub expand: Conv2d,
    pub grn_gamma: ParamId,
    pub grn_beta: ParamId,
    pub project: Conv2d,
}

impl ConvNextBlock {
    pub const KERNEL: usize = 7;
    pub const EXPANSION: usize = 4;

    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize) -> Self {
        let hidden = Self::EXPANSION * channels;
        let dwconv = Conv2d::new(&mut pb.sub("dwconv"), channels, channels, ConvSpec::depthwise(Self::KERNEL, channels, 1));
        let norm = LayerNorm::new(&mut pb.sub("norm"), channels);
        let expand = Conv2d::new(&mut pb.sub("pw1"), channels, hidden, ConvSpec::pointwise());
        let mut grn = pb.sub("grn");
        let grn_gamma = grn.residual("gamma", &[hidden], hidden);
        let grn_beta = grn.residual("beta", &[hidden], hidden);
        let project = Conv2d::residual(&mut pb.sub("pw2"), hidden, channels, ConvSpec::pointwise());
        Self {
            dwconv,
            norm,
            expand,
            grn_gamma,
            grn_beta,
            project,
        }
    }

    pub fn num_params(channels: usize) -> usize {
        let hidden = Self::EXPANSION * channels;
        Conv2d::num_params(channels, channels, &ConvSpec::depthwise(Self::KERNEL, channels, 1))
            + LayerNorm::num_params(channels)
            + Conv2d::num_params(channels, hidden, &ConvSpec::pointwise())
            + 2 * hidden
            + Conv2d::num_params(hidden, channels, &ConvSpec::pointwise())
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let y = self.dwconv.forward(g, x)?;
        let y = self.norm.forward(g, y)?;
        let y = self.expand.forward(g, y)?;
        let y = g.gelu(y);
        let gamma = g.param(self.grn_gamma);
        let beta = g.param(self.grn_beta);
        let y = g.grn(y, gamma, beta)?;
        let y = self.project.forward(g, y)?;
        g.add(x, y)
    }
}

/// Layer normalization followed by a 2×2 stride-2 convolution.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub norm: LayerNorm,
    pub conv: Conv2d,
}

impl Downsample {
    pub fn new(pb: &mut ParamBuilder<'_>, in_channels: usize, out_channels: usize) -> Self {
        Self {
            norm: LayerNorm::new(&mut pb.sub("norm"), in_channels),
            conv: Conv2d::new(&mut pb.sub("conv"), in_channels, out_channels, ConvSpec::patchify(2)),
        }
    }

    pub fn num_params(in_channels: usize, out_channels: usize) -> usize {
        LayerNorm::num_params(in_channels) + Conv2d::num_params(in_channels, out_channels, &ConvSpec::patchify(2))
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (_, h, w, _) = g.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Indivisible {
                height: h,
                width: w,
                factor: 2,
            });
        }
        let y = self.norm.forward(g, x)?;
        self.conv.forward(g, y)
    }
}
