//! Samples, synthetic scene generation, tiling protocols and flip augmentation.

mod augment;
mod sample;
mod synth;
mod tiling;

pub use augment::{apply_flips, augment_flip, Flip, FlipSet};
pub use sample::{Mask, Sample, SampleMeta, TileCoord};
pub use synth::{foreground_ratio, generate_synthetic, SynthSpec};
pub use tiling::{apply_preset, resize_image_bilinear, resize_mask_nearest, TilingPreset};
