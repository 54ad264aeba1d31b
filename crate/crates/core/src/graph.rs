//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied during one forward pass; [`Graph::backward`]
//! walks the record in reverse and returns [`Gradients`] for every input and parameter leaf.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, shape_err, Error, Result};
use crate::ops::attention::{attention_backward, attention_forward, AttnGeom};
use crate::ops::conv::{
    conv2d_backward, conv2d_forward, conv_transpose2d_backward, conv_transpose2d_forward, ConvGeom, ConvSpec,
    TransposedGeom,
};
use crate::ops::gemm::{gemm, MatRef};
use crate::ops::norm::{grn_backward, grn_forward, layer_norm_backward, layer_norm_forward, GrnStats, RowStats};
use crate::ops::spatial;
use crate::ops::{gelu, gelu_grad, sigmoid};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

type Dims = (usize, usize, usize, usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: TransposedGeom },
    Linear { x: Var, w: Var, b: Option<Var> },
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: RowStats },
    Grn { x: Var, gamma: Var, beta: Var, stats: GrnStats },
    Gelu(Var),
    Sigmoid(Var),
    Relu(Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    Upsample { x: Var, dims: Dims, factor: usize },
    GlobalAvgPool { x: Var, dims: Dims },
    Bilinear { x: Var, dims: Dims },
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    ScaleChannels { x: Var, gates: Var },
    Reshape(Var),
    Attention { q: Var, k: Var, v: Var, geom: AttnGeom, probs: Vec<f64> },
    BceDice { logits: Var, dlogits: Vec<f64> },
    Dot { x: Var, weights: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: BTreeMap<ParamId, Var>,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("{}: shapes {:?} and {:?} differ", what, a.shape(), b.shape()));
    }
    Ok(())
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn dims4(&self, v: Var) -> Result<Dims> {
        self.value(v).dims4()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant or differentiable input.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf for a stored parameter; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Leaf);
        self.param_vars.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "add")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "sub")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(ta.shape(), data)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "mul")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape(), data)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|v| v * k);
        self.push(t, Op::Scale(a, k))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu);
        self.push(t, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(crate::ops::relu);
        self.push(t, Op::Relu(a))
    }

    fn check_bias(&self, b: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = b {
            if self.value(b).numel() != channels {
                return Err(shape_err!(
                    "bias has {} elements, expected {}",
                    self.value(b).numel(),
                    channels
                ));
            }
        }
        Ok(())
    }

    /// 2-D convolution of a `(B, H, W, C_in)` map with a `[kh, kw, C_in/groups, C_out]` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let dims = self.dims4(x)?;
        let wt = self.value(w);
        let [kh, kw, cig, out_c] = wt.shape()[..] else {
            return Err(shape_err!("conv2d weight must be rank 4, got {:?}", wt.shape()));
        };
        if (kh, kw) != spec.kernel {
            return Err(shape_err!("kernel {:?} does not match spec {:?}", (kh, kw), spec.kernel));
        }
        let geom = ConvGeom::new(spec, dims, out_c)?;
        if cig * spec.groups != dims.3 {
            return Err(shape_err!(
                "conv2d weight expects {} input channels per group, input has {} over {} groups",
                cig,
                dims.3,
                spec.groups
            ));
        }
        self.check_bias(b, out_c)?;
        let out = conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(geom.out_shape(), out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }))
    }

    /// Transposed convolution with a `[C_in, kh, kw, C_out]` kernel; output extent
    /// `(H - 1) * stride + kh`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let dims = self.dims4(x)?;
        let wt = self.value(w);
        let [cin, kh, kw, out_c] = wt.shape()[..] else {
            return Err(shape_err!("transposed conv weight must be rank 4, got {:?}", wt.shape()));
        };
        if cin != dims.3 {
            return Err(shape_err!("transposed conv expects {} input channels, got {}", cin, dims.3));
        }
        let geom = TransposedGeom::new(dims, (kh, kw), stride, out_c)?;
        self.check_bias(b, out_c)?;
        let out = conv_transpose2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(geom.out_shape(), out)?;
        Ok(self.push(t, Op::ConvTranspose2d { x, w, b, geom }))
    }

    /// Affine map over the trailing axis: `x [.., in] · w [in, out] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xt = self.value(x);
        let wt = self.value(w);
        let [fan_in, fan_out] = wt.shape()[..] else {
            return Err(shape_err!("linear weight must be rank 2, got {:?}", wt.shape()));
        };
        if xt.last_dim() != fan_in {
            return Err(shape_err!("linear expects {} features, got {}", fan_in, xt.last_dim()));
        }
        self.check_bias(b, fan_out)?;
        let rows = xt.numel() / fan_in;
        let mut out = vec![0.0; rows * fan_out];
        gemm(rows, fan_in, fan_out, MatRef::rows(xt.data(), fan_in), MatRef::rows(wt.data(), fan_out), 0.0, &mut out, fan_out);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(fan_out) {
                for (o, v) in row.iter_mut().zip(bias) {
                    *o += v;
                }
            }
        }
        let mut shape = xt.shape().to_vec();
        *shape.last_mut().unwrap() = fan_out;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Linear { x, w, b }))
    }

    /// Normalization over the trailing (channel) axis with learnable scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xt = self.value(x);
        let c = xt.last_dim();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(shape_err!("layer norm affine parameters must have {} elements", c));
        }
        let (out, stats) = layer_norm_forward(xt.data(), c, self.value(gamma).data(), self.value(beta).data(), eps);
        let t = Tensor::new(xt.shape(), out)?;
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, stats }))
    }

    /// Global response normalization (residual form) of a `(B, H, W, C)` map.
    pub fn grn(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let dims = self.dims4(x)?;
        if self.value(gamma).numel() != dims.3 || self.value(beta).numel() != dims.3 {
            return Err(shape_err!("GRN affine parameters must have {} elements", dims.3));
        }
        let (out, stats) = grn_forward(self.value(x).data(), dims, self.value(gamma).data(), self.value(beta).data());
        let t = Tensor::new(self.value(x).shape(), out)?;
        Ok(self.push(t, Op::Grn { x, gamma, beta, stats }))
    }

    fn check_divisible(dims: Dims, s: usize) -> Result<()> {
        if s < 1 {
            return Err(config_err!("pooling factor must be positive"));
        }
        if !dims.1.is_multiple_of(s) || !dims.2.is_multiple_of(s) {
            return Err(Error::Indivisible {
                height: dims.1,
                width: dims.2,
                factor: s,
            });
        }
        Ok(())
    }

    /// Non-overlapping `s × s` max pooling.
    pub fn max_pool(&mut self, x: Var, s: usize) -> Result<Var> {
        let dims = self.dims4(x)?;
        Self::check_divisible(dims, s)?;
        let (out, argmax) = spatial::max_pool_forward(self.value(x).data(), dims, s);
        let t = Tensor::new([dims.0, dims.1 / s, dims.2 / s, dims.3], out)?;
        Ok(self.push(t, Op::MaxPool { x, argmax }))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let dims = self.dims4(x)?;
        if factor < 1 {
            return Err(config_err!("upsampling factor must be positive"));
        }
        let out = spatial::upsample_forward(self.value(x).data(), dims, factor);
        let t = Tensor::new([dims.0, dims.1 * factor, dims.2 * factor, dims.3], out)?;
        Ok(self.push(t, Op::Upsample { x, dims, factor }))
    }

    /// `(B, H, W, C) -> (B, C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let dims = self.dims4(x)?;
        let out = spatial::global_avg_pool_forward(self.value(x).data(), dims);
        let t = Tensor::new([dims.0, dims.3], out)?;
        Ok(self.push(t, Op::GlobalAvgPool { x, dims }))
    }

    /// Bilinear resize with half-pixel centres.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let dims = self.dims4(x)?;
        if out_h == 0 || out_w == 0 {
            return Err(shape_err!("bilinear target size must be positive"));
        }
        let out = spatial::bilinear_forward(self.value(x).data(), dims, out_h, out_w);
        let t = Tensor::new([dims.0, out_h, out_w, dims.3], out)?;
        Ok(self.push(t, Op::Bilinear { x, dims }))
    }

    /// Concatenation along the trailing axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| shape_err!("concat of nothing"))?);
        let lead = &first.shape()[..first.rank() - 1];
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if &t.shape()[..t.rank() - 1] != lead {
                return Err(shape_err!("concat: {:?} does not match {:?}", t.shape(), first.shape()));
            }
            widths.push(t.last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Concat(parts.to_vec())))
    }

    /// Channels `start..start + len` of the trailing axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xt = self.value(x);
        let c = xt.last_dim();
        if start + len > c || len == 0 {
            return Err(shape_err!("slice {}..{} out of range for {} channels", start, start + len, c));
        }
        let out: Vec<f64> = xt.data().chunks_exact(c).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let mut shape = xt.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Slice { x, start }))
    }

    /// Multiplies every spatial position of `x (B, H, W, C)` by the per-item channel vector
    /// `gates (B, C)`.
    pub fn scale_channels(&mut self, x: Var, gates: Var) -> Result<Var> {
        let (b, h, w, c) = self.dims4(x)?;
        let gt = self.value(gates);
        if gt.shape() != [b, c] {
            return Err(shape_err!("gates {:?} do not match map {:?}", gt.shape(), self.value(x).shape()));
        }
        let xt = self.value(x);
        let mut out = xt.data().to_vec();
        for bi in 0..b {
            let gv = &gt.data()[bi * c..(bi + 1) * c];
            for px in out[bi * h * w * c..(bi + 1) * h * w * c].chunks_exact_mut(c) {
                for (o, g) in px.iter_mut().zip(gv) {
                    *o *= g;
                }
            }
        }
        let t = Tensor::new(xt.shape(), out)?;
        Ok(self.push(t, Op::ScaleChannels { x, gates }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Multi-head scaled dot-product attention over `(B, N, D)` token matrices. Queries and
    /// keys may have different token counts; head outputs are concatenated along `D`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let [batch, q_tokens, dim] = qt.shape()[..] else {
            return Err(shape_err!("queries must be rank 3, got {:?}", qt.shape()));
        };
        let [kb, kv_tokens, kd] = kt.shape()[..] else {
            return Err(shape_err!("keys must be rank 3, got {:?}", kt.shape()));
        };
        if kb != batch || kd != dim || vt.shape() != kt.shape() {
            return Err(shape_err!(
                "attention operands disagree: q {:?}, k {:?}, v {:?}",
                qt.shape(),
                kt.shape(),
                vt.shape()
            ));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(config_err!("model dimension {} is not divisible by {} heads", dim, heads));
        }
        let geom = AttnGeom {
            batch,
            q_tokens,
            kv_tokens,
            dim,
            heads,
        };
        let (out, probs) = attention_forward(&geom, qt.data(), kt.data(), vt.data());
        let t = Tensor::new([batch, q_tokens, dim], out)?;
        Ok(self.push(t, Op::Attention { q, k, v, geom, probs }))
    }

    /// Attention probabilities `[batch, head, q, kv]` recorded by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean binary cross-entropy plus batch Dice loss on logits; see
    /// [`crate::objectives::bce_dice_loss`].
    pub fn bce_dice_loss(&mut self, logits: Var, target: &Tensor, eps: f64) -> Result<Var> {
        let (loss, dlogits) = crate::objectives::bce_dice_with_grad(self.value(logits), target, eps)?;
        Ok(self.push(Tensor::scalar(loss), Op::BceDice { logits, dlogits }))
    }

    /// Scalar `sum(x * weights)`.
    pub fn dot(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        same_shape(self.value(x), weights, "dot")?;
        let s = self.value(x).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::Dot {
                x,
                weights: weights.data().to_vec(),
            },
        ))
    }

    /// Back-propagates from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(shape_err!("backward root must be a scalar, got {:?}", self.value(root).shape()));
        }
        self.backward_with(root, Tensor::full(self.value(root).shape(), 1.0))
    }

    /// Back-propagates an explicit output gradient `seed` from `root`. Only gradients of leaf
    /// values (inputs and parameters) are retained.
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Result<Gradients> {
        same_shape(self.value(root), &seed, "backward seed")?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed.into_data());
        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(gy);
            }
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape(), g).expect("gradient shape")))
            .collect();
        Ok(Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        })
    }

    fn propagate(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, gy.to_vec());
                accumulate(grads, *b, gy.to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, gy.to_vec());
                accumulate(grads, *b, gy.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                accumulate(grads, *a, gy.iter().zip(vb).map(|(g, y)| g * y).collect());
                accumulate(grads, *b, gy.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, k) => accumulate(grads, *a, gy.iter().map(|g| g * k).collect()),
            Op::Gelu(a) => accumulate(grads, *a, gy.iter().zip(val(*a)).map(|(g, x)| g * gelu_grad(*x)).collect()),
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data();
                accumulate(grads, *a, gy.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect());
            }
            Op::Relu(a) => accumulate(
                grads,
                *a,
                gy.iter().zip(val(*a)).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect(),
            ),
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = conv2d_backward(geom, val(*x), val(*w), gy, b.is_some());
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
                if let (Some(b), Some(db)) = (b, db) {
                    accumulate(grads, *b, db);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (dx, dw, db) = conv_transpose2d_backward(geom, val(*x), val(*w), gy, b.is_some());
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
                if let (Some(b), Some(db)) = (b, db) {
                    accumulate(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let shape = self.nodes[w.0].value.shape();
                let (fan_in, fan_out) = (shape[0], shape[1]);
                let rows = xv.len() / fan_in;
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                gemm(rows, fan_out, fan_in, MatRef::rows(gy, fan_out), MatRef::transposed(wv, fan_out), 0.0, &mut dx, fan_in);
                gemm(fan_in, rows, fan_out, MatRef::transposed(xv, fan_in), MatRef::rows(gy, fan_out), 0.0, &mut dw, fan_out);
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
                if let Some(b) = b {
                    let mut db = vec![0.0; fan_out];
                    for row in gy.chunks_exact(fan_out) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let c = self.nodes[x.0].value.last_dim();
                let (dx, dg, db) = layer_norm_backward(val(*x), c, val(*gamma), stats, gy);
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, dg);
                accumulate(grads, *beta, db);
            }
            Op::Grn { x, gamma, beta, stats } => {
                let dims = self.nodes[x.0].value.dims4().expect("rank 4");
                let (dx, dg, db) = grn_backward(val(*x), dims, val(*gamma), stats, gy);
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, dg);
                accumulate(grads, *beta, db);
            }
            Op::MaxPool { x, argmax } => {
                accumulate(grads, *x, spatial::max_pool_backward(argmax, val(*x).len(), gy));
            }
            Op::Upsample { x, dims, factor } => {
                accumulate(grads, *x, spatial::upsample_backward(*dims, *factor, gy));
            }
            Op::GlobalAvgPool { x, dims } => {
                accumulate(grads, *x, spatial::global_avg_pool_backward(*dims, gy));
            }
            Op::Bilinear { x, dims } => {
                let out = self.nodes[i].value.shape();
                accumulate(grads, *x, spatial::bilinear_backward(*dims, out[1], out[2], gy));
            }
            Op::Concat(parts) => {
                let total = self.nodes[i].value.last_dim();
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.last_dim();
                    let g: Vec<f64> = gy.chunks_exact(total).flat_map(|row| row[offset..offset + w].iter().copied()).collect();
                    accumulate(grads, *p, g);
                    offset += w;
                }
            }
            Op::Slice { x, start } => {
                let c = self.nodes[x.0].value.last_dim();
                let len = self.nodes[i].value.last_dim();
                let mut dx = vec![0.0; val(*x).len()];
                for (drow, grow) in dx.chunks_exact_mut(c).zip(gy.chunks_exact(len)) {
                    drow[*start..start + len].copy_from_slice(grow);
                }
                accumulate(grads, *x, dx);
            }
            Op::ScaleChannels { x, gates } => {
                let (b, h, w, c) = self.nodes[x.0].value.dims4().expect("rank 4");
                let (xv, gv) = (val(*x), val(*gates));
                let mut dx = vec![0.0; xv.len()];
                let mut dg = vec![0.0; gv.len()];
                for bi in 0..b {
                    let span = bi * h * w * c..(bi + 1) * h * w * c;
                    for ((px, gpx), dpx) in xv[span.clone()]
                        .chunks_exact(c)
                        .zip(gy[span.clone()].chunks_exact(c))
                        .zip(dx[span].chunks_exact_mut(c))
                    {
                        for ch in 0..c {
                            dpx[ch] = gpx[ch] * gv[bi * c + ch];
                            dg[bi * c + ch] += gpx[ch] * px[ch];
                        }
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gates, dg);
            }
            Op::Reshape(x) => accumulate(grads, *x, gy.to_vec()),
            Op::Attention { q, k, v, geom, probs } => {
                let (dq, dk, dv) = attention_backward(geom, val(*q), val(*k), val(*v), probs, gy);
                accumulate(grads, *q, dq);
                accumulate(grads, *k, dk);
                accumulate(grads, *v, dv);
            }
            Op::BceDice { logits, dlogits } => {
                accumulate(grads, *logits, dlogits.iter().map(|d| d * gy[0]).collect());
            }
            Op::Dot { x, weights } => {
                accumulate(grads, *x, weights.iter().map(|w| w * gy[0]).collect());
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_vars: BTreeMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient with respect to a leaf; `None` if it does not influence the root.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to a parameter; `None` if it was not used in the forward pass.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.param_vars.get(&id).and_then(|v| self.wrt(*v))
    }

    /// One gradient per stored parameter, in store order; unused parameters get zeros.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .iter()
            .map(|(id, _, t)| self.param(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}
