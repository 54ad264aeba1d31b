use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::sample::{Mask, Sample, SampleMeta, TileCoord};
use crate::error::{config_err, shape_err, Result};
use crate::ops::spatial::bilinear_forward;
use crate::tensor::Tensor;

/// Ingestion protocol applied to each loaded image/mask pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TilingPreset {
    /// Keep the pair as loaded.
    #[default]
    None,
    /// Resize the whole pair to 768×768.
    Resize,
    /// Split a 1024×1024 pair into a 2×2 grid of 512×512 tiles.
    Quarter,
    /// Split a 1500×1500 pair into a 3×3 grid of 500×500 crops, each resized to 512×512.
    NinePatch,
}

impl TilingPreset {
    pub const RESIZE_SIDE: usize = 768;

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "none" => Ok(Self::None),
            "resize" => Ok(Self::Resize),
            "quarter" => Ok(Self::Quarter),
            "nine-patch" => Ok(Self::NinePatch),
            other => Err(config_err!(
                "unknown tiling preset `{}` (expected none, resize, quarter or nine-patch)",
                other
            )),
        }
    }

    /// `(grid, crop side, output side)` for the grid presets.
    fn grid(self) -> Option<(usize, usize, usize)> {
        match self {
            Self::Quarter => Some((2, 512, 512)),
            Self::NinePatch => Some((3, 500, 512)),
            _ => None,
        }
    }
}

/// Bilinear resize of a `(1, H, W, C)` image with half-pixel centres.
pub fn resize_image_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let dims = image.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(shape_err!("resize target must be non-empty"));
    }
    if (dims.1, dims.2) == (out_h, out_w) {
        return Ok(image.clone());
    }
    Tensor::new([dims.0, out_h, out_w, dims.3], bilinear_forward(image.data(), dims, out_h, out_w))
}

/// Nearest-neighbour mask resize: output pixel `o` reads source `floor((o + 0.5) · src / dst)`.
pub fn resize_mask_nearest(mask: &Mask, out_h: usize, out_w: usize) -> Result<Mask> {
    if out_h == 0 || out_w == 0 {
        return Err(shape_err!("resize target must be non-empty"));
    }
    let src = |o: usize, s: usize, d: usize| (((2 * o + 1) * s) / (2 * d)).min(s - 1);
    let mut data = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = src(y, mask.height(), out_h);
        for x in 0..out_w {
            data.push(mask.get(sy, src(x, mask.width(), out_w)));
        }
    }
    Mask::new(out_h, out_w, data)
}

fn crop(sample: &Sample, y0: usize, x0: usize, side: usize) -> Result<(Tensor, Mask)> {
    let w = sample.width();
    let mut img = Vec::with_capacity(side * side * 3);
    let mut msk = Vec::with_capacity(side * side);
    for y in y0..y0 + side {
        let row = (y * w + x0) * 3;
        img.extend_from_slice(&sample.image.data()[row..row + side * 3]);
        for x in x0..x0 + side {
            msk.push(sample.mask.get(y, x));
        }
    }
    Ok((Tensor::new([1, side, side, 3], img)?, Mask::new(side, side, msk)?))
}

fn mismatch(preset: TilingPreset, sample: &Sample, expected: usize) -> crate::error::Error {
    let name: String = format!("{:?}", preset).to_lowercase();
    shape_err!(
        "preset `{}` expects {}x{} input, `{}` is {}x{}",
        name,
        expected,
        expected,
        sample.meta.source,
        sample.height(),
        sample.width()
    )
}

/// Applies a tiling preset, recording tile coordinates in each output's metadata.
pub fn apply_preset(sample: &Sample, preset: TilingPreset) -> Result<Vec<Sample>> {
    match preset {
        TilingPreset::None => Ok(alloc::vec![sample.clone()]),
        TilingPreset::Resize => {
            let side = TilingPreset::RESIZE_SIDE;
            let image = resize_image_bilinear(&sample.image, side, side)?;
            let mask = resize_mask_nearest(&sample.mask, side, side)?;
            Ok(alloc::vec![Sample::new(image, mask, sample.meta.clone())?])
        }
        TilingPreset::Quarter | TilingPreset::NinePatch => {
            let (n, side, out) = preset.grid().expect("grid preset");
            if sample.height() != n * side || sample.width() != n * side {
                return Err(mismatch(preset, sample, n * side));
            }
            let mut tiles = Vec::with_capacity(n * n);
            for row in 0..n {
                for col in 0..n {
                    let (y0, x0) = (row * side, col * side);
                    let (mut image, mut mask) = crop(sample, y0, x0, side)?;
                    if out != side {
                        image = resize_image_bilinear(&image, out, out)?;
                        mask = resize_mask_nearest(&mask, out, out)?;
                    }
                    let meta = SampleMeta {
                        source: sample.meta.source.clone(),
                        tile: Some(TileCoord {
                            row,
                            col,
                            y0,
                            x0,
                            height: side,
                            width: side,
                        }),
                        augmentation: sample.meta.augmentation.clone(),
                    };
                    tiles.push(Sample::new(image, mask, meta)?);
                }
            }
            Ok(tiles)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_identity_when_same_size() {
        let m = Mask::new(2, 3, alloc::vec![1, 0, 1, 0, 1, 0]).unwrap();
        assert_eq!(resize_mask_nearest(&m, 2, 3).unwrap(), m);
    }

    #[test]
    fn nearest_upscale_doubles_pixels() {
        let m = Mask::new(1, 2, alloc::vec![1, 0]).unwrap();
        let r = resize_mask_nearest(&m, 2, 4).unwrap();
        assert_eq!(r.data(), &[1, 1, 0, 0, 1, 1, 0, 0]);
    }

    #[test]
    fn bilinear_constant_is_preserved() {
        let t = Tensor::full([1, 5, 7, 3], 0.25);
        let r = resize_image_bilinear(&t, 9, 4).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn quarter_rejects_wrong_size() {
        let s = Sample::new(Tensor::zeros([1, 8, 8, 3]), Mask::zeros(8, 8), SampleMeta::default()).unwrap();
        assert!(apply_preset(&s, TilingPreset::Quarter).is_err());
        assert!(TilingPreset::parse("bogus").is_err());
    }
}
