//! Full dual-encoder segmentation network.
//!
//! ```text
//! image ─ stem (stride 4) ─┬─ CNN blocks ──┐
//!                          └─ SFT layers ──┴─ CFFM ─ F1 ─ down ─ stage 2 … ─ F4
//! F4 ─ up×2 ⊕ F3 ─ refine ─ up×2 ⊕ F2 ─ refine ─ up×2 ⊕ F1 ─ refine ─ up×4 ─ GELU ─ head
//! ```

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::cnn::{ConvNextBlock, Downsample, Stem, INPUT_MULTIPLE};
use crate::nn::fusion::Cffm;
use crate::nn::layers::{Conv2d, ConvTranspose2d, LayerNorm};
use crate::nn::sft::{effective_pool_stride, SftConfig, SftLayer};
use crate::ops::conv::ConvSpec;
use crate::params::{InitRng, ParamBuilder, ParamStore};
use crate::tensor::Tensor;

pub const STAGES: usize = 4;
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Channel width of each encoder stage.
    pub widths: [usize; STAGES],
    /// ConvNeXt blocks per stage.
    pub cnn_depths: [usize; STAGES],
    /// SFT layers per stage.
    pub sft_depths: [usize; STAGES],
    pub sft: [SftConfig; STAGES],
    pub cffm_reduction: usize,
    /// Widths of the three skip-connected decoder levels, deepest first.
    pub decoder_widths: [usize; 3],
    /// Zero-initialize every projection that closes a residual branch (and the fusion gate
    /// logits), so each block starts as the identity.
    pub zero_init_residual: bool,
    pub seed: u64,
}

/// Depth and width of one encoder stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub cnn_depth: usize,
    pub sft_depth: usize,
    pub width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl ModelConfig {
    /// Desk-scale configuration used by the test suites.
    pub fn tiny() -> Self {
        let widths = [32, 64, 128, 256];
        Self {
            widths,
            cnn_depths: [1, 1, 2, 1],
            sft_depths: [1, 1, 1, 1],
            sft: widths.map(SftConfig::for_width),
            cffm_reduction: 4,
            decoder_widths: [128, 64, 32],
            zero_init_residual: true,
            seed: 0,
        }
    }

    /// Same topology with every stage and decoder width multiplied by `factor`.
    pub fn scaled_widths(&self, factor: usize) -> Self {
        let mut cfg = self.clone();
        cfg.widths = self.widths.map(|w| w * factor);
        cfg.decoder_widths = self.decoder_widths.map(|w| w * factor);
        for (s, &w) in cfg.sft.iter_mut().zip(&cfg.widths) {
            s.heads = SftConfig::for_width(w).heads;
        }
        cfg
    }

    pub fn stage(&self, i: usize) -> StageSpec {
        StageSpec {
            cnn_depth: self.cnn_depths[i],
            sft_depth: self.sft_depths[i],
            width: self.widths[i],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..STAGES {
            let s = self.stage(i);
            if s.width == 0 {
                return Err(config_err!("widths[{}] must be positive", i));
            }
            if s.cnn_depth == 0 {
                return Err(config_err!("cnn_depths[{}] must be at least 1", i));
            }
            if s.sft_depth == 0 {
                return Err(config_err!("sft_depths[{}] must be at least 1", i));
            }
            if i > 0 && self.widths[i] < self.widths[i - 1] {
                return Err(config_err!("widths must be non-decreasing, widths[{}] < widths[{}]", i, i - 1));
            }
            self.sft[i].validate(s.width).map_err(|e| match e {
                Error::Config(m) => config_err!("sft[{}]: {}", i, m),
                other => other,
            })?;
        }
        if self.cffm_reduction == 0 {
            return Err(config_err!("cffm_reduction must be at least 1"));
        }
        if let Some(i) = self.decoder_widths.iter().position(|&w| w == 0) {
            return Err(config_err!("decoder_widths[{}] must be positive", i));
        }
        Ok(())
    }

    /// Checks that an input of `h × w` can pass through the network.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || !h.is_multiple_of(INPUT_MULTIPLE) || !w.is_multiple_of(INPUT_MULTIPLE) {
            return Err(Error::Indivisible {
                height: h,
                width: w,
                factor: INPUT_MULTIPLE,
            });
        }
        Ok(())
    }

    /// Spatial extent of stage `i` (0-based) for an `h × w` input.
    pub fn stage_extent(&self, i: usize, h: usize, w: usize) -> (usize, usize) {
        let stride = Stem::STRIDE << i;
        (h / stride, w / stride)
    }

    /// Laplacian pool stride each stage uses for an `h × w` input.
    pub fn pool_strides(&self, h: usize, w: usize) -> [usize; STAGES] {
        core::array::from_fn(|i| {
            let (sh, sw) = self.stage_extent(i, h, w);
            effective_pool_stride(sh, sw, self.sft[i].pool_stride)
        })
    }
}

/// Named intermediate feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Tap {
    /// CNN branch output of stage `n` (1-based).
    Cnn(u8),
    /// Transformer branch output of stage `n`.
    Sft(u8),
    /// Fused output of stage `n`.
    Cffm(u8),
    /// Decoder level `n`: 1–3 after each skip refinement, 4 after the final upsampling.
    Decoder(u8),
}

impl Tap {
    pub fn all() -> Vec<Tap> {
        let mut v = Vec::with_capacity(16);
        for i in 1..=STAGES as u8 {
            v.extend([Tap::Cnn(i), Tap::Sft(i), Tap::Cffm(i)]);
        }
        v.extend((1..=4).map(Tap::Decoder));
        v
    }

    /// Parses a comma-separated selector: `all`, a group (`cnn`, `sft`, `cffm`, `dec`), or
    /// individual names such as `cffm-2` or `dec-4`.
    pub fn parse_selector(selector: &str) -> Result<Vec<Tap>> {
        let mut out: Vec<Tap> = Vec::new();
        for item in selector.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let group: Option<Vec<Tap>> = match item {
                "all" => Some(Tap::all()),
                "cnn" => Some((1..=4).map(Tap::Cnn).collect()),
                "sft" => Some((1..=4).map(Tap::Sft).collect()),
                "cffm" => Some((1..=4).map(Tap::Cffm).collect()),
                "dec" => Some((1..=4).map(Tap::Decoder).collect()),
                _ => None,
            };
            let taps = match group {
                Some(t) => t,
                None => alloc::vec![item.parse::<Tap>()?],
            };
            for t in taps {
                if !out.contains(&t) {
                    out.push(t);
                }
            }
        }
        if out.is_empty() {
            return Err(Error::UnknownTap(selector.to_string()));
        }
        Ok(out)
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tap::Cnn(i) => write!(f, "cnn-{i}"),
            Tap::Sft(i) => write!(f, "sft-{i}"),
            Tap::Cffm(i) => write!(f, "cffm-{i}"),
            Tap::Decoder(i) => write!(f, "dec-{i}"),
        }
    }
}

impl core::str::FromStr for Tap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownTap(s.to_string());
        let (kind, idx) = s.rsplit_once('-').ok_or_else(unknown)?;
        let idx: u8 = idx.parse().map_err(|_| unknown())?;
        if !(1..=4).contains(&idx) {
            return Err(unknown());
        }
        match kind {
            "cnn" => Ok(Tap::Cnn(idx)),
            "sft" => Ok(Tap::Sft(idx)),
            "cffm" => Ok(Tap::Cffm(idx)),
            "dec" => Ok(Tap::Decoder(idx)),
            _ => Err(unknown()),
        }
    }
}

/// Logits and sigmoid probabilities, `(B, H, W, 1)` each.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationOutput {
    pub logits: Tensor,
    pub probabilities: Tensor,
}

impl SegmentationOutput {
    pub fn from_logits(logits: Tensor) -> Self {
        let probabilities = logits.map(crate::ops::sigmoid);
        Self { logits, probabilities }
    }
}

/// Anything that maps a `(B, H, W, 3)` image batch to `(B, H, W, 1)` logits through a graph.
pub trait SegmentationModel {
    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;

    fn logits(&self, g: &mut Graph<'_>, images: Var) -> Result<Var>;

    fn predict(&self, images: &Tensor) -> Result<SegmentationOutput> {
        let mut g = Graph::new(self.params());
        let x = g.input(images.clone());
        let logits = self.logits(&mut g, x)?;
        Ok(SegmentationOutput::from_logits(g.value(logits).clone()))
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub cnn: Vec<ConvNextBlock>,
    pub sft: Vec<SftLayer>,
    pub fusion: Cffm,
}

/// Two 3×3 convolutions, each followed by layer norm and GELU.
#[derive(Clone, Debug)]
pub struct RefineBlock {
    pub conv1: Conv2d,
    pub norm1: LayerNorm,
    pub conv2: Conv2d,
    pub norm2: LayerNorm,
}

impl RefineBlock {
    fn new(pb: &mut ParamBuilder<'_>, in_channels: usize, width: usize) -> Self {
        Self {
            conv1: Conv2d::new(&mut pb.sub("conv1"), in_channels, width, ConvSpec::same(3)),
            norm1: LayerNorm::new(&mut pb.sub("norm1"), width),
            conv2: Conv2d::new(&mut pb.sub("conv2"), width, width, ConvSpec::same(3)),
            norm2: LayerNorm::new(&mut pb.sub("norm2"), width),
        }
    }

    pub fn num_params(in_channels: usize, width: usize) -> usize {
        Conv2d::num_params(in_channels, width, &ConvSpec::same(3))
            + Conv2d::num_params(width, width, &ConvSpec::same(3))
            + 2 * LayerNorm::num_params(width)
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(g, x)?;
        let y = self.norm1.forward(g, y)?;
        let y = g.gelu(y);
        let y = self.conv2.forward(g, y)?;
        let y = self.norm2.forward(g, y)?;
        Ok(g.gelu(y))
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLevel {
    pub up: ConvTranspose2d,
    pub refine: RefineBlock,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub levels: Vec<DecoderLevel>,
    pub final_up: ConvTranspose2d,
    pub head: Conv2d,
}

/// Value handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: Var,
    pub taps: Vec<(Tap, Var)>,
}

impl ForwardTrace {
    pub fn tap(&self, tap: Tap) -> Option<Var> {
        self.taps.iter().find(|(t, _)| *t == tap).map(|(_, v)| *v)
    }
}

#[derive(Clone, Debug)]
pub struct DualEncoderNet {
    cfg: ModelConfig,
    params: ParamStore,
    pub stem: Stem,
    pub stages: Vec<Stage>,
    pub downsamples: Vec<Downsample>,
    pub decoder: Decoder,
}

impl DualEncoderNet {
    /// Builds the network with freshly initialized parameters drawn from `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = InitRng::new(cfg.seed);
        let mut pb = ParamBuilder::new(&mut params, &mut rng, cfg.zero_init_residual);
        let w = cfg.widths;

        let stem = Stem::new(&mut pb.sub("stem"), IMAGE_CHANNELS, w[0]);
        let mut stages = Vec::with_capacity(STAGES);
        let mut downsamples = Vec::with_capacity(STAGES - 1);
        for i in 0..STAGES {
            if i > 0 {
                downsamples.push(Downsample::new(&mut pb.sub(&format!("down{i}")), w[i - 1], w[i]));
            }
            let mut sp = pb.sub(&format!("stage{}", i + 1));
            let cnn = (0..cfg.cnn_depths[i])
                .map(|j| ConvNextBlock::new(&mut sp.sub(&format!("cnn{j}")), w[i]))
                .collect();
            let sft = (0..cfg.sft_depths[i])
                .map(|j| SftLayer::new(&mut sp.sub(&format!("sft{j}")), w[i], &cfg.sft[i]))
                .collect();
            let fusion = Cffm::new(&mut sp.sub("cffm"), w[i], cfg.cffm_reduction);
            stages.push(Stage { cnn, sft, fusion });
        }

        let mut dp = pb.sub("decoder");
        let d = cfg.decoder_widths;
        let mut levels = Vec::with_capacity(3);
        let mut prev = w[STAGES - 1];
        for (k, &width) in d.iter().enumerate() {
            let skip = w[STAGES - 2 - k];
            let mut lp = dp.sub(&format!("level{}", k + 1));
            let up = ConvTranspose2d::new(&mut lp.sub("up"), prev, width, 2);
            let refine = RefineBlock::new(&mut lp.sub("refine"), width + skip, width);
            levels.push(DecoderLevel { up, refine });
            prev = width;
        }
        let final_up = ConvTranspose2d::new(&mut dp.sub("final_up"), prev, prev, Stem::STRIDE);
        let head = Conv2d::new(&mut pb.sub("head"), prev, 1, ConvSpec::pointwise());
        let decoder = Decoder { levels, final_up, head };

        Ok(Self {
            cfg,
            params,
            stem,
            stages,
            downsamples,
            decoder,
        })
    }

    /// Builds the network structure for `cfg` and installs `params` in place of the fresh
    /// initialization. Every path must be present with the expected shape.
    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut net = Self::new(cfg)?;
        install(&mut net.params, &params)?;
        Ok(net)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    /// Runs the network inside `g`, recording every tap.
    pub fn trace(&self, g: &mut Graph<'_>, images: Var) -> Result<ForwardTrace> {
        let (_, h, w, c) = g.value(images).dims4()?;
        if c != IMAGE_CHANNELS {
            return Err(shape_err!("expected {} image channels, got {}", IMAGE_CHANNELS, c));
        }
        self.cfg.check_input(h, w)?;
        let strides = self.cfg.pool_strides(h, w);
        let mut taps = Vec::with_capacity(16);
        let mut skips = Vec::with_capacity(STAGES);

        let mut x = self.stem.forward(g, images)?;
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                x = self.downsamples[i - 1].forward(g, x)?;
            }
            let mut fc = x;
            for block in &stage.cnn {
                fc = block.forward(g, fc)?;
            }
            let mut ft = x;
            for layer in &stage.sft {
                ft = layer.forward_with_stride(g, ft, strides[i])?;
            }
            let fused = stage.fusion.forward(g, fc, ft)?;
            let n = (i + 1) as u8;
            taps.extend([(Tap::Cnn(n), fc), (Tap::Sft(n), ft), (Tap::Cffm(n), fused)]);
            skips.push(fused);
            x = fused;
        }

        for (k, level) in self.decoder.levels.iter().enumerate() {
            let up = level.up.forward(g, x)?;
            let cat = g.concat(&[up, skips[STAGES - 2 - k]])?;
            x = level.refine.forward(g, cat)?;
            taps.push((Tap::Decoder((k + 1) as u8), x));
        }
        let up = self.decoder.final_up.forward(g, x)?;
        let up = g.gelu(up);
        taps.push((Tap::Decoder(4), up));
        let logits = self.decoder.head.forward(g, up)?;
        Ok(ForwardTrace { logits, taps })
    }
}

impl SegmentationModel for DualEncoderNet {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn logits(&self, g: &mut Graph<'_>, images: Var) -> Result<Var> {
        Ok(self.trace(g, images)?.logits)
    }
}

/// Copies every tensor of `src` into the same path of `dst`. Both must hold the same paths
/// with the same shapes.
fn install(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    let mut problems: Vec<String> = Vec::new();
    for (_, path, t) in src.iter() {
        match dst.find(path) {
            None => problems.push(format!("unexpected parameter `{path}`")),
            Some(id) => {
                let want = dst.get(id).shape();
                if want != t.shape() {
                    problems.push(format!("`{path}`: expected shape {want:?}, found {:?}", t.shape()));
                }
            }
        }
    }
    for (_, path, _) in dst.iter() {
        if src.find(path).is_none() {
            problems.push(format!("missing parameter `{path}`"));
        }
    }
    if !problems.is_empty() {
        return Err(shape_err!("checkpoint does not fit the model: {}", problems.join("; ")));
    }
    let ids: Vec<_> = dst.ids().collect();
    for id in ids {
        let from = src.find(dst.path(id)).expect("checked above");
        *dst.get_mut(id) = src.get(from).clone();
    }
    Ok(())
}

/// One 3×3 convolution from RGB straight to a logit, as a reference point for training.
#[derive(Clone, Debug)]
pub struct SingleConvBaseline {
    params: ParamStore,
    seed: u64,
    pub conv: Conv2d,
}

impl SingleConvBaseline {
    pub fn new(seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut rng = InitRng::new(seed);
        let mut pb = ParamBuilder::new(&mut params, &mut rng, false);
        let conv = Conv2d::new(&mut pb.sub("conv"), IMAGE_CHANNELS, 1, ConvSpec::same(3));
        Self { params, seed, conv }
    }

    pub fn from_params(seed: u64, params: ParamStore) -> Result<Self> {
        let mut net = Self::new(seed);
        install(&mut net.params, &params)?;
        Ok(net)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl SegmentationModel for SingleConvBaseline {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn logits(&self, g: &mut Graph<'_>, images: Var) -> Result<Var> {
        self.conv.forward(g, images)
    }
}
