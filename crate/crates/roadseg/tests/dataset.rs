use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use roadseg::dataset::{load_tiles, pair_files, write_dataset, IMAGE_DIR, MASK_DIR};
use roadseg::AppError;
use roadseg_core::data::{generate_synthetic, SynthSpec, TilingPreset};

fn write_pair(root: &Path, stem: &str, size: u32, mask_level: impl Fn(u32, u32) -> u8) {
    fs::create_dir_all(root.join(IMAGE_DIR)).unwrap();
    fs::create_dir_all(root.join(MASK_DIR)).unwrap();
    RgbImage::from_fn(size, size, |x, y| Rgb([x as u8, y as u8, 7]))
        .save(root.join(IMAGE_DIR).join(format!("{stem}.png")))
        .unwrap();
    GrayImage::from_fn(size, size, |x, y| Luma([mask_level(x, y)]))
        .save(root.join(MASK_DIR).join(format!("{stem}.png")))
        .unwrap();
}

#[test]
fn pairs_by_stem_and_reports_leftovers() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "a", 8, |_, _| 0);
    write_pair(dir.path(), "b", 8, |_, _| 0);
    fs::remove_file(dir.path().join(MASK_DIR).join("b.png")).unwrap();
    fs::write(dir.path().join(MASK_DIR).join("c.png"), b"").unwrap();
    fs::write(dir.path().join(IMAGE_DIR).join("notes.txt"), b"ignored").unwrap();
    let (pairs, lonely_images, lonely_masks) = pair_files(dir.path()).unwrap();
    assert_eq!(pairs.len(), 1);
    assert_eq!(pairs[0].0, "a");
    assert_eq!(lonely_images, vec!["b".to_string()]);
    assert_eq!(lonely_masks, vec!["c".to_string()]);
}

#[test]
fn missing_mask_directory_is_a_pairing_error() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "a", 8, |_, _| 0);
    fs::remove_dir_all(dir.path().join(MASK_DIR)).unwrap();
    let err = load_tiles(dir.path(), TilingPreset::None).unwrap_err();
    assert!(matches!(err, AppError::Pairing(_)), "{err}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn mismatched_sizes_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "a", 8, |_, _| 0);
    GrayImage::new(4, 4).save(dir.path().join(MASK_DIR).join("a.png")).unwrap();
    assert!(matches!(load_tiles(dir.path(), TilingPreset::None), Err(AppError::Pairing(_))));
}

#[test]
fn masks_are_binarized_on_load() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "a", 16, |x, _| (x * 16) as u8);
    let s = &load_tiles(dir.path(), TilingPreset::None).unwrap().samples[0];
    for y in 0..16 {
        for x in 0..16 {
            assert_eq!(s.mask.get(y, x), u8::from(x * 16 > 127));
        }
    }
    assert_eq!(s.image.at4(0, 3, 5, 0), 5.0 / 255.0);
    assert_eq!(s.image.at4(0, 3, 5, 1), 3.0 / 255.0);
}

#[test]
fn written_dataset_reloads_exactly() {
    let spec = SynthSpec {
        size: 32,
        max_foreground: 0.2,
        ..SynthSpec::default()
    };
    let samples = generate_synthetic(&spec, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &samples).unwrap();
    let back = load_tiles(dir.path(), TilingPreset::None).unwrap().samples;
    assert_eq!(back.len(), 3);
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.meta.source, b.meta.source);
        let worst = a.image.max_abs_diff(&b.image).unwrap();
        assert!(worst <= 0.5 / 255.0 + 1e-12, "{worst}");
    }
}

#[test]
fn quarter_preset_splits_loaded_tiles() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "big", 1024, |x, y| if x >= 512 && y < 512 { 255 } else { 0 });
    let tiles = load_tiles(dir.path(), TilingPreset::Quarter).unwrap().samples;
    assert_eq!(tiles.len(), 4);
    let fg: Vec<usize> = tiles.iter().map(|t| t.mask.foreground()).collect();
    assert_eq!(fg, vec![0, 512 * 512, 0, 0]);
    assert!(load_tiles(dir.path(), TilingPreset::NinePatch).is_err());
}
