use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Binary road mask, row-major, one byte per pixel holding 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err!("mask of {}x{} needs {} bytes, got {}", height, width, height * width, data.len()));
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(shape_err!("mask value {} at index {} is not binary", data[i], i));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: alloc::vec![0; height * width],
        }
    }

    /// Binarizes 8-bit levels: foreground where the value exceeds 127.
    pub fn from_levels(height: usize, width: usize, levels: &[u8]) -> Result<Self> {
        Self::new(height, width, levels.iter().map(|&v| u8::from(v > 127)).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub(crate) fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = u8::from(v);
    }

    pub fn foreground(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// `(1, H, W, 1)` tensor of 0.0 / 1.0.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([1, self.height, self.width, 1], self.data.iter().map(|&v| f64::from(v)).collect())
            .expect("mask dimensions are consistent")
    }

    /// 0 / 255 levels for 8-bit export.
    pub fn to_levels(&self) -> Vec<u8> {
        self.data.iter().map(|&v| v * 255).collect()
    }
}

/// Position of a tile inside its source image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileCoord {
    pub row: usize,
    pub col: usize,
    /// Top-left corner in source pixels.
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub source: String,
    pub tile: Option<TileCoord>,
    /// Applied augmentations, e.g. `"h"`, `"hv"`, or empty.
    pub augmentation: String,
}

/// Image `(1, H, W, 3)` in `[0, 1]` with its aligned binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Mask,
    pub meta: SampleMeta,
}

impl Sample {
    pub fn new(image: Tensor, mask: Mask, meta: SampleMeta) -> Result<Self> {
        let (b, h, w, c) = image.dims4()?;
        if b != 1 || c != 3 {
            return Err(shape_err!("sample image must be (1, H, W, 3), got {:?}", image.shape()));
        }
        if (h, w) != (mask.height, mask.width) {
            return Err(shape_err!("image {}x{} and mask {}x{} differ", h, w, mask.height, mask.width));
        }
        Ok(Self { image, mask, meta })
    }

    pub fn height(&self) -> usize {
        self.mask.height
    }

    pub fn width(&self) -> usize {
        self.mask.width
    }

    /// Stacks samples into `(B, H, W, 3)` images and `(B, H, W, 1)` masks.
    pub fn batch(samples: &[&Sample]) -> Result<(Tensor, Tensor)> {
        let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
        let masks: Vec<Tensor> = samples.iter().map(|s| s.mask.to_tensor()).collect();
        Ok((Tensor::stack_batch(&images)?, Tensor::stack_batch(&masks)?))
    }
}
