use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Dataset, Provenance, Split};
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::rng;

fn one() -> usize {
    1
}

/// Parameters of the glyph dataset. Everything that affects the pixels is
/// here, so the spec doubles as the provenance record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    /// Height and width.
    pub size: usize,
    #[serde(default = "one")]
    pub channels: usize,
    /// Half-width of the uniform per-pixel noise.
    pub noise: f32,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(classes: usize, per_class: usize, size: usize, noise: f32, seed: u64) -> Self {
        Self {
            classes,
            per_class,
            size,
            channels: 1,
            noise,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("classes", format!("{} < 2", self.classes)));
        }
        if self.size < 4 || self.channels == 0 {
            return Err(Error::invalid("size", "images must be at least 4x4 with one channel"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::invalid("noise", format!("{} outside [0, 1]", self.noise)));
        }
        Ok(())
    }
}

const BACKGROUND: f64 = 0.15;
const FOREGROUND: f64 = 0.85;

/// Distance from `p` to the segment `a`–`b`.
fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Noise-free `size × size` glyph of class `k` out of `classes`, with a
/// one-pixel soft edge.
///
/// The shape cycles bar, disc, cross with `k`; the glyph centre sits on a
/// circle at angle `2πk/C` and bars/crosses are rotated by `πk/C`, so every
/// class differs from every other in shape, place or angle.
pub fn glyph(k: usize, classes: usize, size: usize) -> Vec<f32> {
    let s = size as f64;
    let mid = (s - 1.0) / 2.0;
    let phase = 2.0 * PI * k as f64 / classes as f64;
    let centre = (mid + 0.2 * s * phase.cos(), mid + 0.2 * s * phase.sin());
    let theta = PI * k as f64 / classes as f64;
    let dir = (theta.cos(), theta.sin());
    let half = 0.3 * s;
    let width = (0.07 * s).max(0.75);
    let arm = |d: (f64, f64), len: f64| ((centre.0 - d.0 * len, centre.1 - d.1 * len), (centre.0 + d.0 * len, centre.1 + d.1 * len));
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let p = (x as f64, y as f64);
            let dist = match k % 3 {
                0 => {
                    let (a, b) = arm(dir, half);
                    segment_distance(p, a, b) - width
                }
                1 => ((p.0 - centre.0).powi(2) + (p.1 - centre.1).powi(2)).sqrt() - 0.17 * s,
                _ => {
                    let (a, b) = arm(dir, 0.2 * s);
                    let (c, d) = arm((-dir.1, dir.0), 0.2 * s);
                    segment_distance(p, a, b).min(segment_distance(p, c, d)) - width
                }
            };
            let cover = (0.5 - dist).clamp(0.0, 1.0);
            out.push((BACKGROUND + (FOREGROUND - BACKGROUND) * cover) as f32);
        }
    }
    out
}

/// Glyph images plus seeded uniform pixel noise, clipped to `[0, 1]`.
/// Rows cycle through the classes; train and test use disjoint streams.
pub fn gen_synthetic(spec: &SyntheticSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let (c, hw) = (spec.channels, spec.size * spec.size);
    let glyphs: Vec<Vec<f32>> = (0..spec.classes).map(|k| glyph(k, spec.classes, spec.size)).collect();
    let n = spec.classes * spec.per_class;
    let split_tag = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    let mut rng = rng::stream(spec.seed, "synthetic", &[split_tag]);
    let noise = spec.noise as f64;
    let mut data = Vec::with_capacity(n * c * hw);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % spec.classes;
        labels.push(k);
        for _ in 0..c {
            for &g in &glyphs[k] {
                let e = if noise > 0.0 { rng.random_range(-noise..=noise) } else { 0.0 };
                data.push((g as f64 + e).clamp(0.0, 1.0) as f32);
            }
        }
    }
    let images = Tensor::new(vec![n, c, spec.size, spec.size], data)?;
    Dataset::new(images, labels, spec.classes, split, Provenance::Synthetic(spec.clone()))
}
