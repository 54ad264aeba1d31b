//! Heat-map rendering of intermediate feature maps.

use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::graph::Graph;
use crate::nn::network::{DualEncoderNet, SegmentationModel, Tap};
use crate::ops::spatial::bilinear_forward;
use crate::tensor::Tensor;

/// Normalized activation map in `[0, 1]` at the input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub tap: Tap,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    /// 8-bit grey levels, rounded.
    pub fn to_levels(&self) -> Vec<u8> {
        self.values.iter().map(|&v| libm::round(v * 255.0) as u8).collect()
    }
}

/// Channel mean of `|x|` for batch item 0 of a `(B, H, W, C)` map, resized to `out_h × out_w`
/// and min-max scaled. A constant map becomes all zeros.
pub fn heatmap_from_features(tap: Tap, features: &Tensor, out_h: usize, out_w: usize) -> Result<Heatmap> {
    let (_, h, w, c) = features.dims4()?;
    let item = features.batch_item(0)?;
    let mean: Vec<f64> = item
        .data()
        .chunks_exact(c)
        .map(|px| px.iter().map(|v| v.abs()).sum::<f64>() / c as f64)
        .collect();
    let mut values = bilinear_forward(&mean, (1, h, w, 1), out_h, out_w);
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    for v in &mut values {
        *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
    }
    Ok(Heatmap {
        tap,
        height: out_h,
        width: out_w,
        values,
    })
}

/// Runs one image `(1, H, W, 3)` through the network and renders the requested taps.
pub fn export_activations(net: &DualEncoderNet, image: &Tensor, taps: &[Tap]) -> Result<Vec<Heatmap>> {
    let (b, h, w, _) = image.dims4()?;
    if b != 1 {
        return Err(shape_err!("activation export takes a single image, got batch {}", b));
    }
    let mut g = Graph::new(net.params());
    let x = g.input(image.clone());
    let trace = net.trace(&mut g, x)?;
    taps.iter()
        .map(|&tap| {
            let v = trace.tap(tap).expect("every tap is recorded");
            heatmap_from_features(tap, g.value(v), h, w)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_is_zero() {
        let t = Tensor::full([1, 2, 2, 3], -4.0);
        let m = heatmap_from_features(Tap::Cnn(1), &t, 4, 4).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn range_is_unit() {
        let t = Tensor::from_fn([1, 2, 2, 2], |i| i as f64 - 3.0);
        let m = heatmap_from_features(Tap::Sft(2), &t, 2, 2).unwrap();
        let max = m.values.iter().cloned().fold(f64::MIN, f64::max);
        let min = m.values.iter().cloned().fold(f64::MAX, f64::min);
        assert_eq!((min, max), (0.0, 1.0));
        assert_eq!(m.to_levels().iter().filter(|&&l| l == 255).count(), 1);
    }
}
