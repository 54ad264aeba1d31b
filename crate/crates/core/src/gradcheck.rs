//! Central-difference gradient checking for graph-built functions.
//!
//! A function `f(inputs, params)` producing any tensor is reduced to the scalar
//! `L = sum(f · r)` with a fixed random `r`, and each analytic partial of `L` is compared to
//! `(L(θ + h) − L(θ − h)) / 2h`. The relative error of one coordinate is
//! `|a − n| / max(|a|, |n|, floor)`; the floor keeps coordinates whose true gradient is
//! numerically zero from being judged on round-off alone.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::graph::{Graph, Var};
use crate::nn::cnn::{ConvNextBlock, Downsample};
use crate::nn::fusion::Cffm;
use crate::nn::layers::{Conv2d, ConvTranspose2d, LayerNorm};
use crate::nn::network::{DualEncoderNet, ModelConfig, SegmentationModel};
use crate::nn::sft::{Cfia, Mffn, Sca, SftConfig, SftLayer};
use crate::ops::conv::ConvSpec;
use crate::params::{InitRng, ParamBuilder, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
    /// Check at most this many coordinates per tensor (always including the largest analytic
    /// partial); `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate with its analytic and numeric partials.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub module: String,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn coordinates(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-scale..scale))
}

fn coords(rng: &mut ChaCha8Rng, analytic: &[f64], max: Option<usize>) -> Vec<usize> {
    match max {
        Some(k) if k < analytic.len() => {
            let top = analytic
                .iter()
                .enumerate()
                .fold((0, -1.0), |best, (i, v)| if v.abs() > best.1 { (i, v.abs()) } else { best })
                .0;
            let mut picked: Vec<usize> = sample(rng, analytic.len(), k).into_vec();
            if !picked.contains(&top) {
                picked[0] = top;
            }
            picked.sort_unstable();
            picked
        }
        _ => (0..analytic.len()).collect(),
    }
}

/// Checks the gradients of `f` with respect to every input and every parameter in `params`.
pub fn grad_check<F>(
    module: &str,
    params: &ParamStore,
    inputs: &[Tensor],
    cfg: &GradCheckConfig,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6772_6164);
    let eval = |store: &ParamStore, xs: &[Tensor], r: Option<&Tensor>| -> Result<(Tensor, Option<f64>)> {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        let value = g.value(out).clone();
        let l = r.map(|r| value.data().iter().zip(r.data()).map(|(a, b)| a * b).sum());
        Ok((value, l))
    };

    let (out, _) = eval(params, inputs, None)?;
    let r = random_tensor(&mut rng, out.shape(), 1.0);

    let mut g = Graph::new(params);
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let y = f(&mut g, &vars)?;
    let l = g.dot(y, &r)?;
    let grads = g.backward(l)?;

    let mut tensors = Vec::new();
    let mut judge = |name: String, analytic: &[f64], numeric: &mut dyn FnMut(usize) -> Result<f64>, rng: &mut ChaCha8Rng| -> Result<()> {
        let mut check = TensorCheck {
            name,
            checked: 0,
            max_rel_error: 0.0,
            worst: None,
        };
        for i in coords(rng, analytic, cfg.max_coords) {
            let n = numeric(i)?;
            let a = analytic[i];
            let err = (a - n).abs() / a.abs().max(n.abs()).max(cfg.floor);
            check.checked += 1;
            if err > check.max_rel_error || check.worst.is_none() {
                check.max_rel_error = check.max_rel_error.max(err);
                check.worst = Some((i, a, n));
            }
        }
        tensors.push(check);
        Ok(())
    };

    let h = cfg.step;
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v).map(|t| t.data().to_vec()).unwrap_or_else(|| alloc::vec![0.0; inputs[k].numel()]);
        let mut xs = inputs.to_vec();
        let mut numeric = |i: usize| -> Result<f64> {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + h;
            let plus = eval(params, &xs, Some(&r))?.1.unwrap();
            xs[k].data_mut()[i] = orig - h;
            let minus = eval(params, &xs, Some(&r))?.1.unwrap();
            xs[k].data_mut()[i] = orig;
            Ok((plus - minus) / (2.0 * h))
        };
        judge(format!("input{k}"), &analytic, &mut numeric, &mut rng)?;
    }

    let param_grads = grads.for_store(params);
    let mut store = params.clone();
    for (id, path, _) in params.iter() {
        let analytic = param_grads[id.index()].data().to_vec();
        let mut numeric = |i: usize| -> Result<f64> {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval(&store, inputs, Some(&r))?.1.unwrap();
            store.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval(&store, inputs, Some(&r))?.1.unwrap();
            store.get_mut(id).data_mut()[i] = orig;
            Ok((plus - minus) / (2.0 * h))
        };
        judge(path.to_string(), &analytic, &mut numeric, &mut rng)?;
    }

    Ok(GradCheckReport {
        module: module.to_string(),
        tolerance: cfg.tolerance,
        tensors,
    })
}

/// Modules with a built-in finite-difference suite.
pub const SUITES: &[&str] = &[
    "conv2d",
    "transposed_conv2d",
    "layer_norm",
    "grn",
    "attention",
    "convnext_v2_block",
    "downsample",
    "sca",
    "cfia",
    "mffn",
    "sft_layer",
    "cffm",
    "bce_dice_loss",
    "network",
];

/// Runs the named suite. Modules use random (not zero) initialization of residual
/// projections so that every parameter receives a nonzero gradient.
pub fn run_suite(name: &str, seed: u64) -> Result<GradCheckReport> {
    let cfg = GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    };
    let mut store = ParamStore::new();
    let mut init = InitRng::new(seed);
    let mut data = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let (b, h, w, c) = (1, 8, 8, 8);
    let x = random_tensor(&mut data, &[b, h, w, c], 1.0);
    let mut pb = ParamBuilder::new(&mut store, &mut init, false);

    macro_rules! check {
        ($build:expr, $inputs:expr, |$m:ident, $g:ident, $v:ident| $body:expr) => {{
            let $m = $build;
            drop(pb);
            grad_check(name, &store, &$inputs, &cfg, |$g, $v| $body)
        }};
    }

    match name {
        "conv2d" => {
            let spec = ConvSpec {
                stride: 2,
                dilation: 1,
                ..ConvSpec::same(3)
            };
            check!(Conv2d::new(&mut pb, c, 5, spec), [x], |m, g, v| m.forward(g, v[0]))
        }
        "transposed_conv2d" => {
            check!(ConvTranspose2d::new(&mut pb, c, 4, 2), [x], |m, g, v| m.forward(g, v[0]))
        }
        "layer_norm" => {
            let ln = LayerNorm::new(&mut pb, c);
            let (gm, bt) = (ln.gamma, ln.beta);
            drop(pb);
            randomize(&mut store, &[gm, bt], &mut data);
            grad_check(name, &store, &[x], &cfg, |g, v| ln.forward(g, v[0]))
        }
        "grn" => {
            let gamma = pb.uniform("gamma", &[c], c);
            let beta = pb.uniform("beta", &[c], c);
            drop(pb);
            grad_check(name, &store, &[x], &cfg, |g, v| {
                let (gm, bt) = (g.param(gamma), g.param(beta));
                g.grn(v[0], gm, bt)
            })
        }
        "attention" => {
            drop(pb);
            let q = random_tensor(&mut data, &[2, 6, 8], 1.0);
            let k = random_tensor(&mut data, &[2, 4, 8], 1.0);
            let vv = random_tensor(&mut data, &[2, 4, 8], 1.0);
            grad_check(name, &store, &[q, k, vv], &cfg, |g, v| g.attention(v[0], v[1], v[2], 2))
        }
        "convnext_v2_block" => {
            check!(ConvNextBlock::new(&mut pb, c), [x], |m, g, v| m.forward(g, v[0]))
        }
        "downsample" => {
            check!(Downsample::new(&mut pb, c, 12), [x], |m, g, v| m.forward(g, v[0]))
        }
        "sca" => check!(Sca::new(&mut pb, c, &[1, 2]), [x], |m, g, v| m.forward(g, v[0])),
        "cfia" => check!(Cfia::new(&mut pb, c, 2, 2), [x], |m, g, v| m.forward(g, v[0])),
        "mffn" => check!(Mffn::new(&mut pb, c, 16, &[3, 5]), [x], |m, g, v| m.forward(g, v[0])),
        "sft_layer" => {
            let sft = SftConfig {
                heads: 2,
                ..SftConfig::for_width(c)
            };
            check!(SftLayer::new(&mut pb, c, &sft), [x], |m, g, v| m.forward(g, v[0]))
        }
        "cffm" => {
            let y = random_tensor(&mut data, &[b, h, w, c], 1.0);
            check!(Cffm::new(&mut pb, c, 4), [x, y], |m, g, v| m.forward(g, v[0], v[1]))
        }
        "bce_dice_loss" => {
            drop(pb);
            let logits = random_tensor(&mut data, &[2, 6, 6, 1], 3.0);
            let target = Tensor::from_fn([2, 6, 6, 1], |_| f64::from(data.gen_bool(0.3)));
            grad_check(name, &store, &[logits], &cfg, |g, v| g.bce_dice_loss(v[0], &target, 1.0))
        }
        "network" => {
            drop(pb);
            let model_cfg = ModelConfig {
                zero_init_residual: false,
                seed,
                ..ModelConfig::tiny()
            };
            let net = DualEncoderNet::new(model_cfg)?;
            let image = Tensor::from_fn([1, 32, 32, 3], |_| data.gen::<f64>());
            let sampled = GradCheckConfig {
                max_coords: Some(4),
                ..cfg
            };
            grad_check(name, net.params(), &[image], &sampled, |g, v| net.logits(g, v[0]))
        }
        other => Err(config_err!("unknown gradcheck module `{}`; available: {}", other, SUITES.join(", "))),
    }
}

fn randomize(store: &mut ParamStore, ids: &[crate::params::ParamId], rng: &mut ChaCha8Rng) {
    for &id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
}
