mod oracle;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roadseg_core::data::{
    apply_preset, augment_flip, foreground_ratio, generate_synthetic, resize_mask_nearest, Flip, Mask, Sample, SampleMeta,
    SynthSpec, TileCoord, TilingPreset,
};
use roadseg_core::{Error, Tensor};

/// Random mask; image channel 0 carries the mask bit as a marker, the others are noise.
fn marked_sample(seed: u64, h: usize, w: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bits: Vec<u8> = (0..h * w).map(|_| u8::from(rng.gen_bool(0.3))).collect();
    let image = Tensor::from_fn([1, h, w, 3], |i| if i % 3 == 0 { f64::from(bits[i / 3]) } else { rng.gen() });
    Sample::new(image, Mask::new(h, w, bits).unwrap(), SampleMeta { source: "m".into(), ..Default::default() }).unwrap()
}

fn marker_agrees(s: &Sample) -> bool {
    s.image.data().chunks(3).zip(s.mask.data()).all(|(px, &m)| px[0] == f64::from(m))
}

#[test]
fn flips_are_involutions() {
    let s = marked_sample(1, 6, 6);
    for f in [Flip::Horizontal, Flip::Vertical, Flip::Diagonal] {
        let once = augment_flip(&s, f).unwrap();
        assert!(marker_agrees(&once));
        let twice = augment_flip(&once, f).unwrap();
        assert_eq!(twice.image, s.image);
        assert_eq!(twice.mask, s.mask);
    }
    let r = marked_sample(2, 4, 7);
    for f in [Flip::Horizontal, Flip::Vertical] {
        assert_eq!(augment_flip(&augment_flip(&r, f).unwrap(), f).unwrap().mask, r.mask);
    }
    assert!(augment_flip(&r, Flip::Diagonal).is_err());
}

#[test]
fn horizontal_then_vertical_is_half_turn() {
    let s = marked_sample(3, 5, 7);
    let r = augment_flip(&augment_flip(&s, Flip::Horizontal).unwrap(), Flip::Vertical).unwrap();
    let (h, w) = (5, 7);
    for y in 0..h {
        for x in 0..w {
            assert_eq!(r.mask.get(y, x), s.mask.get(h - 1 - y, w - 1 - x));
            for c in 0..3 {
                assert_eq!(r.image.at4(0, y, x, c), s.image.at4(0, h - 1 - y, w - 1 - x, c));
            }
        }
    }
    assert_eq!(r.meta.augmentation, "hv");
}

#[test]
fn diagonal_flip_is_transpose() {
    let s = marked_sample(4, 5, 5);
    let d = augment_flip(&s, Flip::Diagonal).unwrap();
    for y in 0..5 {
        for x in 0..5 {
            assert_eq!(d.mask.get(y, x), s.mask.get(x, y));
        }
    }
}

#[test]
fn quarter_preset_records_exact_corners() {
    let s = marked_sample(5, 1024, 1024);
    let tiles = apply_preset(&s, TilingPreset::Quarter).unwrap();
    assert_eq!(tiles.len(), 4);
    for (t, (y0, x0)) in tiles.iter().zip(oracle::grid_origins(2, 512)) {
        assert_eq!(
            t.meta.tile,
            Some(TileCoord { row: y0 / 512, col: x0 / 512, y0, x0, height: 512, width: 512 })
        );
        assert_eq!((t.height(), t.width()), (512, 512));
        for (y, x) in [(0, 0), (511, 511), (17, 300), (400, 3)] {
            assert_eq!(t.mask.get(y, x), s.mask.get(y0 + y, x0 + x));
            assert_eq!(t.image.at4(0, y, x, 1), s.image.at4(0, y0 + y, x0 + x, 1));
        }
        assert!(marker_agrees(t));
    }
}

#[test]
fn nine_patch_preset_matches_crop_coordinate_oracle() {
    let s = marked_sample(6, 1500, 1500);
    let tiles = apply_preset(&s, TilingPreset::NinePatch).unwrap();
    assert_eq!(tiles.len(), 9);
    for (t, (y0, x0)) in tiles.iter().zip(oracle::grid_origins(3, 500)) {
        let tc = t.meta.tile.unwrap();
        assert_eq!((tc.y0, tc.x0, tc.height, tc.width), (y0, x0, 500, 500));
        assert_eq!((t.height(), t.width()), (512, 512));
        for y in 0..512 {
            let sy = y0 + oracle::nearest_source(y, 500, 512);
            for x in 0..512 {
                let sx = x0 + oracle::nearest_source(x, 500, 512);
                assert_eq!(t.mask.get(y, x), s.mask.get(sy, sx));
            }
        }
        assert!(t.mask.data().iter().all(|&v| v <= 1));
        // The nearest source pixel always carries at least a quarter of the bilinear weight.
        for (px, &m) in t.image.data().chunks(3).zip(t.mask.data()) {
            if m == 1 {
                assert!(px[0] >= 0.25 - 1e-12);
            } else {
                assert!(px[0] <= 0.75 + 1e-12);
            }
        }
    }
}

#[test]
fn presets_reject_wrong_sizes() {
    let s = marked_sample(7, 1000, 1000);
    for p in [TilingPreset::Quarter, TilingPreset::NinePatch] {
        assert!(matches!(apply_preset(&s, p), Err(Error::Shape(_))));
    }
    let r = apply_preset(&marked_sample(8, 40, 60), TilingPreset::Resize).unwrap();
    assert_eq!((r[0].height(), r[0].width()), (768, 768));
    assert!(r[0].mask.data().iter().all(|&v| v <= 1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nearest_resize_stays_binary_and_matches_oracle(
        h in 1usize..40, w in 1usize..40, oh in 1usize..60, ow in 1usize..60, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Mask::new(h, w, (0..h * w).map(|_| u8::from(rng.gen_bool(0.5))).collect()).unwrap();
        let r = resize_mask_nearest(&m, oh, ow).unwrap();
        for y in 0..oh {
            for x in 0..ow {
                prop_assert_eq!(r.get(y, x), m.get(oracle::nearest_source(y, h, oh), oracle::nearest_source(x, w, ow)));
            }
        }
    }

    #[test]
    fn flips_preserve_alignment(seed in any::<u64>(), side in 1usize..12) {
        let s = marked_sample(seed, side, side);
        for f in [Flip::Horizontal, Flip::Vertical, Flip::Diagonal] {
            let t = augment_flip(&s, f).unwrap();
            prop_assert!(marker_agrees(&t));
            prop_assert_eq!(t.mask.foreground(), s.mask.foreground());
        }
    }
}

#[test]
fn synthetic_scenes_respect_the_foreground_cap() {
    let spec = SynthSpec::default();
    let samples = generate_synthetic(&spec, 100).unwrap();
    let ratios: Vec<f64> = samples.iter().map(|s| foreground_ratio(&s.mask)).collect();
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    assert!(mean < 0.05, "mean foreground {mean}");
    assert!(ratios.iter().all(|&r| r < spec.max_foreground));
    assert!(ratios.iter().filter(|&&r| r > 0.0).count() > 90);
    for s in &samples {
        assert!(s.mask.data().iter().all(|&v| v <= 1));
        assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn synthetic_roads_are_visible_where_not_occluded() {
    // Without occluders every mask pixel shows road paint, which is brighter than the fields.
    let spec = SynthSpec { occluders: (0, 0), seed: 9, ..SynthSpec::default() };
    for s in generate_synthetic(&spec, 10).unwrap() {
        let mut road = (0.0, 0);
        let mut field = (0.0, 0);
        for (px, &m) in s.image.data().chunks(3).zip(s.mask.data()) {
            let v = px.iter().sum::<f64>() / 3.0;
            if m == 1 {
                road = (road.0 + v, road.1 + 1);
            } else {
                field = (field.0 + v, field.1 + 1);
            }
        }
        if road.1 > 0 {
            assert!(road.0 / road.1 as f64 > field.0 / field.1 as f64);
        }
    }
}

#[test]
fn synthetic_generation_is_deterministic_and_index_addressable() {
    let spec = SynthSpec { size: 64, seed: 42, ..SynthSpec::default() };
    let a = generate_synthetic(&spec, 6).unwrap();
    assert_eq!(a, generate_synthetic(&spec, 6).unwrap());
    // Sample i does not depend on how many samples are requested.
    assert_eq!(a[..3], generate_synthetic(&spec, 3).unwrap()[..]);
    let other = generate_synthetic(&SynthSpec { seed: 43, ..spec }, 1).unwrap();
    assert_ne!(a[0].image, other[0].image);
}

#[test]
fn infeasible_specs_are_rejected() {
    let spec = SynthSpec { size: 64, roads: (3, 3), road_width: (2.0, 3.0), ..SynthSpec::default() };
    assert!(matches!(generate_synthetic(&spec, 1), Err(Error::InfeasibleSpec(_))));
    let spec = SynthSpec { road_width: (3.0, 2.0), ..SynthSpec::default() };
    assert!(matches!(generate_synthetic(&spec, 1), Err(Error::InfeasibleSpec(_))));
}

#[test]
fn empty_scene_spec() {
    let spec = SynthSpec { roads: (0, 0), occluders: (0, 0), size: 32, ..SynthSpec::default() };
    let s = &generate_synthetic(&spec, 1).unwrap()[0];
    assert_eq!(s.mask.foreground(), 0);
}
