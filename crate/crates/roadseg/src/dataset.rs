//! Paired `images/` + `masks/` directories of 8-bit files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, RgbImage};
use roadseg_core::data::{apply_preset, Mask, Sample, SampleMeta, TilingPreset};
use roadseg_core::Tensor;

use crate::error::{AppError, AppResult};

pub const IMAGE_DIR: &str = "images";
pub const MASK_DIR: &str = "masks";
const EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "tif", "tiff", "bmp"];

/// Loaded samples plus the stems that had no partner.
#[derive(Debug, Default)]
pub struct LoadReport {
    pub samples: Vec<Sample>,
    pub unmatched_images: Vec<String>,
    pub unmatched_masks: Vec<String>,
}

/// Image files directly inside `dir`, keyed by file stem.
pub fn list_by_stem(dir: &Path) -> AppResult<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(AppError::Pairing(format!("missing directory {}", dir.display())));
    }
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| AppError::io(dir, e))? {
        let path = entry.map_err(|e| AppError::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !path.is_file() || !ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            return Err(AppError::Pairing(format!(
                "stem `{stem}` appears twice: {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

/// Stems present in both subdirectories, and the leftovers of each side.
pub fn pair_files(root: &Path) -> AppResult<(Vec<(String, PathBuf, PathBuf)>, Vec<String>, Vec<String>)> {
    let images = list_by_stem(&root.join(IMAGE_DIR))?;
    let mut masks = list_by_stem(&root.join(MASK_DIR))?;
    let mut pairs = Vec::new();
    let mut lonely_images = Vec::new();
    for (stem, img) in images {
        match masks.remove(&stem) {
            Some(m) => pairs.push((stem, img, m)),
            None => lonely_images.push(stem),
        }
    }
    Ok((pairs, lonely_images, masks.into_keys().collect()))
}

pub fn read_rgb(path: &Path) -> AppResult<Tensor> {
    let img = ImageReader::open(path)
        .map_err(|e| AppError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| AppError::io(path, e))?
        .decode()
        .map_err(|source| AppError::Decode {
            path: path.into(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    Ok(Tensor::new([1, h as usize, w as usize, 3], data)?)
}

pub fn read_mask(path: &Path) -> AppResult<Mask> {
    let img = ImageReader::open(path)
        .map_err(|e| AppError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| AppError::io(path, e))?
        .decode()
        .map_err(|source| AppError::Decode {
            path: path.into(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Mask::from_levels(h as usize, w as usize, img.as_raw())?)
}

/// Loads every matched pair under `root` and applies `preset`. Unmatched files are reported,
/// not fatal, unless nothing matched at all.
pub fn load_tiles(root: &Path, preset: TilingPreset) -> AppResult<LoadReport> {
    let (pairs, unmatched_images, unmatched_masks) = pair_files(root)?;
    if pairs.is_empty() {
        return Err(AppError::Pairing(format!(
            "no image/mask pairs under {} ({} unmatched images, {} unmatched masks)",
            root.display(),
            unmatched_images.len(),
            unmatched_masks.len()
        )));
    }
    let mut samples = Vec::new();
    for (stem, img_path, mask_path) in pairs {
        let image = read_rgb(&img_path)?;
        let mask = read_mask(&mask_path)?;
        let meta = SampleMeta {
            source: stem.clone(),
            ..Default::default()
        };
        let sample = Sample::new(image, mask, meta).map_err(|e| AppError::Pairing(format!("`{stem}`: {e}")))?;
        samples.extend(apply_preset(&sample, preset).map_err(|e| AppError::Pairing(format!("`{stem}`: {e}")))?);
    }
    Ok(LoadReport {
        samples,
        unmatched_images,
        unmatched_masks,
    })
}

pub fn rgb_image(image: &Tensor) -> AppResult<RgbImage> {
    let (_, h, w, _) = image.dims4()?;
    let bytes = image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    Ok(RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches dimensions"))
}

pub fn save_gray(path: &Path, height: usize, width: usize, levels: Vec<u8>) -> AppResult<()> {
    let img = GrayImage::from_raw(width as u32, height as u32, levels).expect("buffer matches dimensions");
    img.save(path).map_err(|source| AppError::Encode {
        path: path.into(),
        source,
    })
}

pub fn create_dir(path: &Path) -> AppResult<()> {
    fs::create_dir_all(path).map_err(|e| AppError::io(path, e))
}

/// Writes samples as `images/<source>.png` and `masks/<source>.png` (0/255 levels).
pub fn write_dataset(root: &Path, samples: &[Sample]) -> AppResult<()> {
    let (img_dir, mask_dir) = (root.join(IMAGE_DIR), root.join(MASK_DIR));
    create_dir(&img_dir)?;
    create_dir(&mask_dir)?;
    for s in samples {
        let name = format!("{}.png", s.meta.source);
        let path = img_dir.join(&name);
        rgb_image(&s.image)?.save(&path).map_err(|source| AppError::Encode { path, source })?;
        save_gray(&mask_dir.join(&name), s.height(), s.width(), s.mask.to_levels())?;
    }
    Ok(())
}
