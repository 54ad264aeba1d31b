//! Channel feature fusion of the CNN and transformer branches.
//!
//! Both maps are squeezed by global average pooling into one `2C` descriptor, passed through a
//! `2C → ⌈2C/r⌉ → 2C` MLP with a rectifier in between, and gated by a sigmoid. The gate vector
//! is split into one `C`-vector per branch and the output is the gated sum of the two maps.

use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::nn::layers::Linear;
use crate::params::ParamBuilder;

#[derive(Clone, Debug)]
pub struct Cffm {
    pub fc1: Linear,
    pub fc2: Linear,
    pub channels: usize,
}

/// Per-branch channel gates, each entry in `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatePair {
    /// `(B, C)` gates for the CNN branch.
    pub cnn: Vec<f64>,
    /// `(B, C)` gates for the transformer branch.
    pub transformer: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct CffmVars {
    pub output: Var,
    pub gates_cnn: Var,
    pub gates_transformer: Var,
}

impl Cffm {
    pub fn hidden_width(channels: usize, reduction: usize) -> usize {
        (2 * channels).div_ceil(reduction.max(1))
    }

    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize, reduction: usize) -> Self {
        let hidden = Self::hidden_width(channels, reduction);
        Self {
            fc1: Linear::new(&mut pb.sub("fc1"), 2 * channels, hidden),
            fc2: Linear::residual(&mut pb.sub("fc2"), hidden, 2 * channels),
            channels,
        }
    }

    pub fn num_params(channels: usize, reduction: usize) -> usize {
        let hidden = Self::hidden_width(channels, reduction);
        Linear::num_params(2 * channels, hidden) + Linear::num_params(hidden, 2 * channels)
    }

    pub fn forward(&self, g: &mut Graph<'_>, f_cnn: Var, f_trans: Var) -> Result<Var> {
        Ok(self.forward_detailed(g, f_cnn, f_trans)?.output)
    }

    pub fn forward_detailed(&self, g: &mut Graph<'_>, f_cnn: Var, f_trans: Var) -> Result<CffmVars> {
        let (a, b) = (g.value(f_cnn).shape(), g.value(f_trans).shape());
        if a != b {
            return Err(shape_err!("fusion inputs differ in shape: {:?} vs {:?}", a, b));
        }
        let c = g.value(f_cnn).dims4()?.3;
        if c != self.channels {
            return Err(shape_err!("fusion expects {} channels, got {}", self.channels, c));
        }
        let zc = g.global_avg_pool(f_cnn)?;
        let zt = g.global_avg_pool(f_trans)?;
        let z = g.concat(&[zc, zt])?;
        let h = self.fc1.forward(g, z)?;
        let h = g.relu(h);
        let logits = self.fc2.forward(g, h)?;
        let gates = g.sigmoid(logits);
        let gates_cnn = g.slice(gates, 0, c)?;
        let gates_transformer = g.slice(gates, c, c)?;
        let a = g.scale_channels(f_cnn, gates_cnn)?;
        let b = g.scale_channels(f_trans, gates_transformer)?;
        let output = g.add(a, b)?;
        Ok(CffmVars {
            output,
            gates_cnn,
            gates_transformer,
        })
    }

    pub fn gates(&self, g: &mut Graph<'_>, f_cnn: Var, f_trans: Var) -> Result<GatePair> {
        let v = self.forward_detailed(g, f_cnn, f_trans)?;
        Ok(GatePair {
            cnn: g.value(v.gates_cnn).data().to_vec(),
            transformer: g.value(v.gates_transformer).data().to_vec(),
        })
    }
}
