//! Parameterized building blocks shared by the encoder branches and the decoder.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::ops::conv::ConvSpec;
use crate::params::{ParamBuilder, ParamId};

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    pub fn new(pb: &mut ParamBuilder<'_>, in_channels: usize, out_channels: usize, spec: ConvSpec) -> Self {
        let shape = spec.weight_shape(in_channels, out_channels);
        let fan_in = shape[0] * shape[1] * shape[2];
        let weight = pb.uniform("weight", &shape, fan_in);
        let bias = Some(pb.zeros("bias", &[out_channels]));
        Self {
            weight,
            bias,
            spec,
            in_channels,
            out_channels,
        }
    }

    /// Convolution without a bias term.
    pub fn unbiased(pb: &mut ParamBuilder<'_>, in_channels: usize, out_channels: usize, spec: ConvSpec) -> Self {
        let shape = spec.weight_shape(in_channels, out_channels);
        let fan_in = shape[0] * shape[1] * shape[2];
        Self {
            weight: pb.uniform("weight", &shape, fan_in),
            bias: None,
            spec,
            in_channels,
            out_channels,
        }
    }

    /// Convolution closing a residual branch (see [`ParamBuilder::residual`]).
    pub fn residual(pb: &mut ParamBuilder<'_>, in_channels: usize, out_channels: usize, spec: ConvSpec) -> Self {
        let shape = spec.weight_shape(in_channels, out_channels);
        let fan_in = shape[0] * shape[1] * shape[2];
        let weight = pb.residual("weight", &shape, fan_in);
        let bias = Some(pb.zeros("bias", &[out_channels]));
        Self {
            weight,
            bias,
            spec,
            in_channels,
            out_channels,
        }
    }

    pub fn num_params(in_channels: usize, out_channels: usize, spec: &ConvSpec) -> usize {
        spec.kernel.0 * spec.kernel.1 * (in_channels / spec.groups) * out_channels + out_channels
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, &self.spec)
    }
}

/// `k × k`, stride-`k` transposed convolution (non-overlapping upsampling by `k`).
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new(pb: &mut ParamBuilder<'_>, in_channels: usize, out_channels: usize, stride: usize) -> Self {
        let weight = pb.uniform("weight", &[in_channels, stride, stride, out_channels], in_channels);
        let bias = pb.zeros("bias", &[out_channels]);
        Self { weight, bias, stride }
    }

    pub fn num_params(in_channels: usize, out_channels: usize, stride: usize) -> usize {
        in_channels * stride * stride * out_channels + out_channels
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv_transpose2d(x, w, Some(b), self.stride)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize) -> Self {
        Self {
            gamma: pb.ones("gamma", &[channels]),
            beta: pb.zeros("beta", &[channels]),
        }
    }

    pub fn num_params(channels: usize) -> usize {
        2 * channels
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: pb.uniform("weight", &[fan_in, fan_out], fan_in),
            bias: pb.zeros("bias", &[fan_out]),
        }
    }

    pub fn residual(pb: &mut ParamBuilder<'_>, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: pb.residual("weight", &[fan_in, fan_out], fan_in),
            bias: pb.zeros("bias", &[fan_out]),
        }
    }

    pub fn num_params(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, Some(b))
    }
}

/// Element-wise sum of two or more values.
pub(crate) fn sum_all(g: &mut Graph<'_>, parts: &[Var]) -> Result<Var> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    Ok(acc)
}
