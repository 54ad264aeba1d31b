use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::sample::{Mask, Sample};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flip {
    /// Mirror left-right.
    Horizontal,
    /// Mirror top-bottom.
    Vertical,
    /// Transpose the two spatial axes; square inputs only.
    Diagonal,
}

impl Flip {
    fn tag(self) -> char {
        match self {
            Flip::Horizontal => 'h',
            Flip::Vertical => 'v',
            Flip::Diagonal => 'd',
        }
    }

    /// Source coordinate for output pixel `(y, x)` of an `h × w` grid.
    fn source(self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            Flip::Horizontal => (y, w - 1 - x),
            Flip::Vertical => (h - 1 - y, x),
            Flip::Diagonal => (x, y),
        }
    }
}

/// Which flips to apply, in horizontal → vertical → diagonal order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlipSet {
    pub horizontal: bool,
    pub vertical: bool,
    pub diagonal: bool,
}

fn remap<T: Copy>(src: &[T], h: usize, w: usize, channels: usize, flip: Flip) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = flip.source(y, x, h, w);
            let i = (sy * w + sx) * channels;
            out.extend_from_slice(&src[i..i + channels]);
        }
    }
    out
}

pub fn augment_flip(sample: &Sample, flip: Flip) -> Result<Sample> {
    let (h, w) = (sample.height(), sample.width());
    if flip == Flip::Diagonal && h != w {
        return Err(shape_err!("diagonal flip needs a square sample, got {}x{}", h, w));
    }
    let image = Tensor::new([1, h, w, 3], remap(sample.image.data(), h, w, 3, flip))?;
    let mask = Mask::new(h, w, remap(sample.mask.data(), h, w, 1, flip))?;
    let mut meta = sample.meta.clone();
    meta.augmentation.push(flip.tag());
    Ok(Sample { image, mask, meta })
}

pub fn apply_flips(sample: &Sample, flips: FlipSet) -> Result<Sample> {
    let mut s = sample.clone();
    for (on, f) in [
        (flips.horizontal, Flip::Horizontal),
        (flips.vertical, Flip::Vertical),
        (flips.diagonal, Flip::Diagonal),
    ] {
        if on {
            s = augment_flip(&s, f)?;
        }
    }
    Ok(s)
}
