use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::sample::{Mask, Sample, SampleMeta};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters of the synthetic rural-road scene generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    /// Square canvas side in pixels.
    pub size: usize,
    /// Inclusive range of roads per scene.
    pub roads: (usize, usize),
    /// Inclusive road width range in pixels.
    pub road_width: (f64, f64),
    /// Maximum control-point displacement as a fraction of the canvas side.
    pub curvature: f64,
    /// Inclusive range of occluding canopy blobs per scene.
    pub occluders: (usize, usize),
    /// Blob radius range in pixels.
    pub occluder_radius: (f64, f64),
    /// Cell size of the coarse background texture in pixels.
    pub noise_scale: f64,
    /// Upper bound on the foreground fraction of every mask.
    pub max_foreground: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            size: 128,
            roads: (1, 3),
            road_width: (2.0, 4.0),
            curvature: 0.25,
            occluders: (0, 4),
            occluder_radius: (3.0, 7.0),
            noise_scale: 16.0,
            max_foreground: 0.05,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: alloc::string::String| Err(Error::InfeasibleSpec(msg));
        if self.size < 8 {
            return bad(format!("size must be at least 8, got {}", self.size));
        }
        if self.roads.0 > self.roads.1 {
            return bad(format!("roads range {:?} is empty", self.roads));
        }
        let (wmin, wmax) = self.road_width;
        if !(wmin > 0.0 && wmin <= wmax && wmax.is_finite()) {
            return bad(format!("road_width range {:?} is invalid", self.road_width));
        }
        if self.occluders.0 > self.occluders.1 {
            return bad(format!("occluders range {:?} is empty", self.occluders));
        }
        let (rmin, rmax) = self.occluder_radius;
        if !(rmin >= 0.0 && rmin <= rmax && rmax.is_finite()) {
            return bad(format!("occluder_radius range {:?} is invalid", self.occluder_radius));
        }
        if !(self.noise_scale >= 1.0) || !(self.curvature >= 0.0) {
            return bad(format!(
                "noise_scale must be >= 1 and curvature >= 0 (got {}, {})",
                self.noise_scale, self.curvature
            ));
        }
        if !(self.max_foreground > 0.0 && self.max_foreground <= 1.0) {
            return bad(format!("max_foreground must lie in (0, 1], got {}", self.max_foreground));
        }
        // The thinnest possible straight road still covers about width × side pixels.
        let min_ratio = self.roads.0 as f64 * wmin / self.size as f64;
        if min_ratio >= self.max_foreground {
            return bad(format!(
                "{} road(s) of width {} on a {}px canvas cover at least {:.3} of the image, above the cap {}",
                self.roads.0, wmin, self.size, min_ratio, self.max_foreground
            ));
        }
        if self.roads.0 > 0 && wmin / self.size as f64 >= self.max_foreground {
            return bad(format!("minimum road width {} cannot satisfy the foreground cap", wmin));
        }
        Ok(())
    }
}

pub fn foreground_ratio(mask: &Mask) -> f64 {
    mask.foreground() as f64 / (mask.height() * mask.width()) as f64
}

/// Per-sample stream seed, so workers can generate disjoint index ranges independently.
fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates `n` scenes. Sample `i` depends only on `(spec, i)`.
pub fn generate_synthetic(spec: &SynthSpec, n: usize) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    spec.validate()?;
    (0..n).map(|i| render_scene(spec, i)).collect()
}

struct Canvas {
    side: usize,
    rgb: Vec<f64>,
}

impl Canvas {
    fn put(&mut self, y: usize, x: usize, c: [f64; 3]) {
        let i = (y * self.side + x) * 3;
        self.rgb[i..i + 3].copy_from_slice(&c);
    }
}

/// Smooth value noise: random lattice values interpolated with a smoothstep.
fn value_noise(rng: &mut ChaCha8Rng, side: usize, cell: f64) -> Vec<f64> {
    let cells = (side as f64 / cell) as usize + 2;
    let lattice: Vec<f64> = (0..cells * cells).map(|_| rng.gen::<f64>()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        let fy = y as f64 / cell;
        let (iy, ty) = (fy as usize, smooth(fy - libm::floor(fy)));
        for x in 0..side {
            let fx = x as f64 / cell;
            let (ix, tx) = (fx as usize, smooth(fx - libm::floor(fx)));
            let at = |a: usize, b: usize| lattice[a * cells + b];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

fn point_on_border(rng: &mut ChaCha8Rng, side: f64, edge: usize) -> (f64, f64) {
    let t = rng.gen_range(0.1..0.9) * side;
    match edge {
        0 => (0.0, t),
        1 => (side - 1.0, t),
        2 => (t, 0.0),
        _ => (t, side - 1.0),
    }
}

/// Samples a cubic Bezier between two different canvas edges as a polyline of `(y, x)` points.
fn road_polyline(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Vec<(f64, f64)> {
    let side = spec.size as f64;
    let e0 = rng.gen_range(0..4);
    let e1 = (e0 + rng.gen_range(1..4)) % 4;
    let p0 = point_on_border(rng, side, e0);
    let p3 = point_on_border(rng, side, e1);
    let jitter = spec.curvature * side;
    let mut control = |a: (f64, f64), b: (f64, f64), t: f64| {
        let mut d = || if jitter > 0.0 { rng.gen_range(-jitter..=jitter) } else { 0.0 };
        (a.0 + (b.0 - a.0) * t + d(), a.1 + (b.1 - a.1) * t + d())
    };
    let p1 = control(p0, p3, 1.0 / 3.0);
    let p2 = control(p0, p3, 2.0 / 3.0);
    let steps = 64;
    (0..=steps)
        .map(|k| {
            let t = k as f64 / steps as f64;
            let u = 1.0 - t;
            let b = [u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t];
            (
                b[0] * p0.0 + b[1] * p1.0 + b[2] * p2.0 + b[3] * p3.0,
                b[0] * p0.1 + b[1] * p1.1 + b[2] * p2.1 + b[3] * p3.1,
            )
        })
        .collect()
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dy + (p.1 - a.1) * dx) / len2).clamp(0.0, 1.0)
    };
    let (ey, ex) = (a.0 + t * dy - p.0, a.1 + t * dx - p.1);
    libm::sqrt(ey * ey + ex * ex)
}

/// Pixel centres within `width / 2` of the polyline.
fn rasterize(line: &[(f64, f64)], width: f64, side: usize) -> Vec<usize> {
    let mut hit = alloc::vec![false; side * side];
    let r = width / 2.0;
    let clamp = |v: f64| (v.max(0.0) as usize).min(side - 1);
    for seg in line.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let (y_lo, y_hi) = (clamp(a.0.min(b.0) - r - 1.0), clamp(a.0.max(b.0) + r + 1.0));
        let (x_lo, x_hi) = (clamp(a.1.min(b.1) - r - 1.0), clamp(a.1.max(b.1) + r + 1.0));
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                if segment_distance((y as f64 + 0.5, x as f64 + 0.5), a, b) <= r {
                    hit[y * side + x] = true;
                }
            }
        }
    }
    hit.iter().enumerate().filter(|(_, &h)| h).map(|(i, _)| i).collect()
}

fn render_scene(spec: &SynthSpec, index: usize) -> Result<Sample> {
    let side = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, index));

    // Background: two field colours blended by coarse noise plus fine grain.
    let field_a = [rng.gen_range(0.20..0.35), rng.gen_range(0.35..0.55), rng.gen_range(0.15..0.30)];
    let field_b = [rng.gen_range(0.45..0.60), rng.gen_range(0.38..0.50), rng.gen_range(0.25..0.35)];
    let coarse = value_noise(&mut rng, side, spec.noise_scale);
    let fine = value_noise(&mut rng, side, (spec.noise_scale / 4.0).max(1.0));
    let mut canvas = Canvas {
        side,
        rgb: Vec::with_capacity(side * side * 3),
    };
    for (c, f) in coarse.iter().zip(&fine) {
        let t = c.clamp(0.0, 1.0);
        for ch in 0..3 {
            let v = field_a[ch] * (1.0 - t) + field_b[ch] * t + 0.08 * (f - 0.5);
            canvas.rgb.push(v);
        }
    }

    // Roads: a road that would push the mask past the cap is dropped.
    let mut mask = Mask::zeros(side, side);
    let cap = (spec.max_foreground * (side * side) as f64) as usize;
    let wanted = rng.gen_range(spec.roads.0..=spec.roads.1);
    let mut lines = Vec::new();
    let mut attempts = 0;
    while lines.len() < wanted && attempts < wanted * 8 {
        attempts += 1;
        let line = road_polyline(&mut rng, spec);
        let width = rng.gen_range(spec.road_width.0..=spec.road_width.1);
        let pixels = rasterize(&line, width, side);
        let fresh = pixels.iter().filter(|&&i| mask.data()[i] == 0).count();
        if mask.foreground() + fresh >= cap {
            continue;
        }
        let tone = rng.gen_range(0.55..0.75);
        let road = [tone, tone * 0.95, tone * 0.85];
        for &i in &pixels {
            let (y, x) = (i / side, i % side);
            mask.set(y, x, true);
            let grain = 0.04 * (fine[i] - 0.5);
            canvas.put(y, x, [road[0] + grain, road[1] + grain, road[2] + grain]);
        }
        lines.push(line);
    }

    // Canopy blobs cover the image only; half of them sit on a road.
    let blobs = rng.gen_range(spec.occluders.0..=spec.occluders.1);
    for _ in 0..blobs {
        let centre = if !lines.is_empty() && rng.gen_bool(0.5) {
            let line = &lines[rng.gen_range(0..lines.len())];
            line[rng.gen_range(0..line.len())]
        } else {
            (rng.gen_range(0.0..side as f64), rng.gen_range(0.0..side as f64))
        };
        let radius = rng.gen_range(spec.occluder_radius.0..=spec.occluder_radius.1);
        let green = [rng.gen_range(0.08..0.15), rng.gen_range(0.22..0.32), rng.gen_range(0.06..0.12)];
        let lo = |v: f64| (v - radius).max(0.0) as usize;
        let hi = |v: f64| ((v + radius).max(0.0) as usize).min(side - 1);
        for y in lo(centre.0)..=hi(centre.0) {
            for x in lo(centre.1)..=hi(centre.1) {
                let (dy, dx) = (y as f64 + 0.5 - centre.0, x as f64 + 0.5 - centre.1);
                if dy * dy + dx * dx <= radius * radius {
                    canvas.put(y, x, green);
                }
            }
        }
    }

    for v in &mut canvas.rgb {
        *v = v.clamp(0.0, 1.0);
    }
    let image = Tensor::new([1, side, side, 3], canvas.rgb)?;
    let meta = SampleMeta {
        source: format!("synth-{}-{:06}", spec.seed, index),
        tile: None,
        augmentation: Default::default(),
    };
    Sample::new(image, mask, meta)
}
