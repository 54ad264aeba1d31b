//! Closed-form parameter and FLOP accounting.
//!
//! FLOP conventions, per batch item:
//! - convolution: `2 · kh · kw · (C_in / groups) · C_out · H_out · W_out`
//! - transposed convolution: `2 · kh · kw · C_in · C_out · H_in · W_in`
//! - attention: `2 · N_q · N_kv · D` for the scores plus the same for the weighted values,
//!   and one op per score for the softmax (`heads · N_q · N_kv`)
//! - normalization, pooling, activations, element-wise sums and the fusion MLP on pooled
//!   descriptors: one op per element touched (input elements for reductions, output
//!   elements otherwise)
//! - concatenation, slicing and reshapes are free; biases are not counted.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::cnn::{ConvNextBlock, Downsample, Stem};
use crate::nn::fusion::Cffm;
use crate::nn::network::{ModelConfig, RefineBlock, IMAGE_CHANNELS, STAGES};
use crate::nn::layers::{Conv2d, ConvTranspose2d};
use crate::nn::sft::{SftConfig, SftLayer};
use crate::ops::conv::ConvSpec;

/// Number of learnable scalars of the network described by `cfg`.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let w = cfg.widths;
    let mut n = Stem::num_params(IMAGE_CHANNELS, w[0]);
    for i in 0..STAGES {
        if i > 0 {
            n += Downsample::num_params(w[i - 1], w[i]);
        }
        n += cfg.cnn_depths[i] * ConvNextBlock::num_params(w[i]);
        n += cfg.sft_depths[i] * SftLayer::num_params(w[i], &cfg.sft[i]);
        n += Cffm::num_params(w[i], cfg.cffm_reduction);
    }
    let mut prev = w[STAGES - 1];
    for (k, &d) in cfg.decoder_widths.iter().enumerate() {
        n += ConvTranspose2d::num_params(prev, d, 2);
        n += RefineBlock::num_params(d + w[STAGES - 2 - k], d);
        prev = d;
    }
    n += ConvTranspose2d::num_params(prev, prev, Stem::STRIDE);
    n += Conv2d::num_params(prev, 1, &ConvSpec::pointwise());
    n
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    /// Convolutions and transposed convolutions.
    pub conv: u64,
    /// Attention products and softmax.
    pub attention: u64,
    /// Everything else.
    pub other: u64,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.conv + self.attention + self.other
    }
}

struct Counter {
    r: FlopReport,
}

impl Counter {
    fn conv(&mut self, k: usize, cin_per_group: usize, cout: usize, pixels: usize) {
        self.r.conv += (2 * k * k * cin_per_group * cout * pixels) as u64;
    }

    fn elems(&mut self, n: usize) {
        self.r.other += n as u64;
    }

    fn attention(&mut self, q: usize, kv: usize, dim: usize, heads: usize) {
        self.r.attention += (4 * q * kv * dim + heads * q * kv) as u64;
    }

    fn sft_layer(&mut self, c: usize, cfg: &SftConfig, p: usize, stride: usize) {
        let hidden = cfg.hidden_width(c);
        self.elems(p * c); // norm1
        for _ in &cfg.sca_dilations {
            self.conv(3, 1, c, p);
        }
        self.conv(1, cfg.sca_dilations.len() * c, c, p);
        // Laplacian split: pooling and upsampling are skipped for the degenerate stride 1.
        if stride > 1 {
            self.elems(p * c);
            self.elems(p * c);
        }
        self.elems(p * c);
        let low = p / (stride * stride);
        self.conv(1, c, c, p); // q
        self.conv(1, c, c, p); // k high
        self.conv(1, c, c, p); // v high
        self.conv(1, c, c, low); // k low
        self.conv(1, c, c, low); // v low
        self.attention(p, p, c, cfg.heads);
        self.attention(p, low, c, cfg.heads);
        self.elems(p * c); // branch sum
        self.conv(1, c, c, p); // out proj
        self.elems(p * c); // sca + cfia
        self.conv(1, c, c, p); // merge
        self.elems(p * c); // residual
        self.elems(p * c); // norm2
        self.conv(1, c, hidden, p);
        for &k in &cfg.mffn_kernels {
            self.conv(k, 1, hidden, p);
        }
        self.elems(cfg.mffn_kernels.len() * hidden * p);
        self.elems(hidden * p); // gelu
        self.conv(1, hidden, c, p);
        self.elems(p * c); // residual
    }

    fn convnext(&mut self, c: usize, p: usize) {
        let hidden = ConvNextBlock::EXPANSION * c;
        self.conv(ConvNextBlock::KERNEL, 1, c, p);
        self.elems(p * c); // norm
        self.conv(1, c, hidden, p);
        self.elems(p * hidden); // gelu
        self.elems(p * hidden); // grn
        self.conv(1, hidden, c, p);
        self.elems(p * c); // residual
    }

    fn cffm(&mut self, c: usize, reduction: usize, p: usize) {
        let hidden = Cffm::hidden_width(c, reduction);
        self.elems(2 * p * c); // pooling
        self.elems(2 * 2 * c * hidden); // fc1
        self.elems(hidden); // relu
        self.elems(2 * hidden * 2 * c); // fc2
        self.elems(2 * c); // sigmoid
        self.elems(2 * p * c); // gating
        self.elems(p * c); // sum
    }

    fn refine(&mut self, cin: usize, d: usize, p: usize) {
        self.conv(3, cin, d, p);
        self.elems(2 * p * d);
        self.conv(3, d, d, p);
        self.elems(2 * p * d);
    }

    fn transposed(&mut self, k: usize, cin: usize, cout: usize, in_pixels: usize) {
        self.r.conv += (2 * k * k * cin * cout * in_pixels) as u64;
    }
}

/// FLOPs of one forward pass on an `h × w` image.
pub fn estimate_flops(cfg: &ModelConfig, h: usize, w: usize) -> Result<FlopReport> {
    cfg.validate()?;
    cfg.check_input(h, w)?;
    let strides = cfg.pool_strides(h, w);
    let widths = cfg.widths;
    let mut c = Counter { r: FlopReport::default() };

    let (sh, sw) = cfg.stage_extent(0, h, w);
    c.conv(Stem::STRIDE, IMAGE_CHANNELS, widths[0], sh * sw);
    c.elems(sh * sw * widths[0]);
    for i in 0..STAGES {
        let (sh, sw) = cfg.stage_extent(i, h, w);
        let p = sh * sw;
        if i > 0 {
            c.elems(4 * p * widths[i - 1]);
            c.conv(2, widths[i - 1], widths[i], p);
        }
        for _ in 0..cfg.cnn_depths[i] {
            c.convnext(widths[i], p);
        }
        for _ in 0..cfg.sft_depths[i] {
            c.sft_layer(widths[i], &cfg.sft[i], p, strides[i]);
        }
        c.cffm(widths[i], cfg.cffm_reduction, p);
    }
    let mut prev = widths[STAGES - 1];
    for (k, &d) in cfg.decoder_widths.iter().enumerate() {
        let stage = STAGES - 2 - k;
        let (ih, iw) = cfg.stage_extent(stage + 1, h, w);
        let (oh, ow) = cfg.stage_extent(stage, h, w);
        c.transposed(2, prev, d, ih * iw);
        c.refine(d + widths[stage], d, oh * ow);
        prev = d;
    }
    let (ih, iw) = cfg.stage_extent(0, h, w);
    c.transposed(Stem::STRIDE, prev, prev, ih * iw);
    c.elems(h * w * prev); // gelu
    c.conv(1, prev, 1, h * w); // head
    Ok(c.r)
}
