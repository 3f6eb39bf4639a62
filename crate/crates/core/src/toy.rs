//! Procedural "lesion" dataset: an ellipse or polygon blob on a textured,
//! vignetted background, with the exact blob support as the mask.

use std::f32::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeled::{LabeledImage, Sample};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub count: usize,
    pub size: usize,
    /// Alternative texture statistics (finer, noisier, warmer background).
    pub shifted: bool,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            count: 348,
            size: 32,
            shifted: false,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("count must be at least 1".into()));
        }
        if self.size < 8 || self.size % 4 != 0 {
            return Err(Error::Config(format!("size {} must be a multiple of 4 and ≥ 8", self.size)));
        }
        Ok(())
    }

    pub fn stage(&self) -> &'static str {
        if self.shifted {
            "toy-shifted"
        } else {
            "toy"
        }
    }
}

enum Shape {
    Ellipse { cx: f32, cy: f32, a: f32, b: f32, theta: f32 },
    Polygon { cx: f32, cy: f32, pts: Vec<(f32, f32)> },
}

impl Shape {
    fn draw<R: Rng + ?Sized>(rng: &mut R, size: f32) -> Self {
        let s = size / 32.0;
        let cx = rng.random_range(9.0 * s..23.0 * s);
        let cy = rng.random_range(9.0 * s..23.0 * s);
        if rng.random_bool(0.5) {
            Shape::Ellipse {
                cx,
                cy,
                a: rng.random_range(4.0 * s..8.0 * s),
                b: rng.random_range(4.0 * s..8.0 * s),
                theta: rng.random_range(0.0..PI),
            }
        } else {
            let n = rng.random_range(5..=7);
            let start = rng.random_range(0.0..2.0 * PI);
            let pts = (0..n)
                .map(|k| {
                    let ang = start + 2.0 * PI * (k as f32 + rng.random_range(-0.2..0.2)) / n as f32;
                    let r = rng.random_range(4.0 * s..8.0 * s);
                    (cx + r * ang.cos(), cy + r * ang.sin())
                })
                .collect();
            Shape::Polygon { cx, cy, pts }
        }
    }

    /// Normalized radial distance (below 1 inside) or `None` outside.
    fn depth(&self, x: f32, y: f32) -> Option<f32> {
        match self {
            Shape::Ellipse { cx, cy, a, b, theta } => {
                let (dx, dy) = (x - cx, y - cy);
                let (c, s) = (theta.cos(), theta.sin());
                let u = (c * dx + s * dy) / a;
                let v = (-s * dx + c * dy) / b;
                let d = u * u + v * v;
                (d <= 1.0).then(|| d.sqrt())
            }
            Shape::Polygon { cx, cy, pts } => {
                let mut inside = false;
                let n = pts.len();
                for i in 0..n {
                    let (xi, yi) = pts[i];
                    let (xj, yj) = pts[(i + n - 1) % n];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                }
                let rmax = pts
                    .iter()
                    .map(|(px, py)| ((px - cx).powi(2) + (py - cy).powi(2)).sqrt())
                    .fold(0.0f32, f32::max);
                inside.then(|| (((x - cx).powi(2) + (y - cy).powi(2)).sqrt() / rmax).min(1.0))
            }
        }
    }
}

/// One image from its own stream.
pub fn toy_image<R: Rng + ?Sized>(rng: &mut R, size: usize, shifted: bool) -> LabeledImage {
    let sz = size as f32;
    let (base, freq, grain) = if shifted {
        ([0.70, 0.56, 0.34], (0.9, 1.5), 0.045)
    } else {
        ([0.78, 0.48, 0.42], (0.3, 0.8), 0.02)
    };
    let bg: Vec<f32> = base.iter().map(|b| b + rng.random_range(-0.06..0.06)).collect();
    let waves: Vec<(f32, f32, f32)> = (0..3)
        .map(|_| {
            let f = rng.random_range(freq.0..freq.1) * 32.0 / sz;
            let dir = rng.random_range(0.0..2.0 * PI);
            (f * dir.cos(), f * dir.sin(), rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let lesion: Vec<f32> = [0.88f32, 0.36, 0.36]
        .iter()
        .map(|b| b + rng.random_range(-0.05..0.05))
        .collect();
    let shape = Shape::draw(rng, sz);
    let noise = Normal::new(0.0f32, grain).expect("positive sd");
    let plane = size * size;
    let mut data = vec![0.0f32; 4 * plane];
    let mut any = false;
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let tex: f32 = waves.iter().map(|(fx, fy, ph)| 0.05 * (fx * px + fy * py + ph).sin()).sum();
            let r2 = ((px - sz / 2.0).powi(2) + (py - sz / 2.0).powi(2)) / (sz * sz / 2.0);
            let vignette = 1.0 - 0.25 * r2;
            let depth = shape.depth(px, py);
            let i = y * size + x;
            for c in 0..3 {
                let n = noise.sample(rng);
                let v = match depth {
                    Some(d) => lesion[c] * (1.0 + 0.15 * (1.0 - d)) + 0.5 * tex + n,
                    None => (bg[c] + tex) * vignette + n,
                };
                data[c * plane + i] = v.clamp(0.0, 1.0) * 2.0 - 1.0;
            }
            data[3 * plane + i] = if depth.is_some() { 1.0 } else { -1.0 };
            any |= depth.is_some();
        }
    }
    if !any {
        // degenerate polygon: mark the pixel under the center
        let i = (size / 2) * size + size / 2;
        data[3 * plane + i] = 1.0;
    }
    LabeledImage::new(Tensor::new(vec![4, size, size], data).expect("dims")).expect("four channels")
}

/// `count` images; image `i` uses stream `(seed, "toy" | "toy-shifted", i)`.
pub fn generate(cfg: &ToyConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let prefix = if cfg.shifted { "toys" } else { "toy" };
    Ok((0..cfg.count)
        .map(|i| {
            let mut rng = seed::stream(cfg.seed, cfg.stage(), i as u64);
            Sample::new(format!("{prefix}_{i:04}"), toy_image(&mut rng, cfg.size, cfg.shifted))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeled::hash_samples;

    #[test]
    fn masks_nonempty_and_deterministic() {
        let cfg = ToyConfig { count: 40, ..ToyConfig::default() };
        let a = generate(&cfg).unwrap();
        assert_eq!(a.len(), 40);
        for s in &a {
            let fg = s.image.mask().iter().filter(|&&v| v == 1.0).count();
            assert!(fg > 0 && fg < 32 * 32 / 2, "{fg}");
            assert!(s.image.tensor().data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert_eq!(hash_samples(&a), hash_samples(&generate(&cfg).unwrap()));
        let other = generate(&ToyConfig { seed: 1, ..cfg.clone() }).unwrap();
        assert_ne!(hash_samples(&a), hash_samples(&other));
        assert!(ToyConfig { count: 0, ..cfg }.validate().is_err());
    }

    #[test]
    fn lesion_pixels_are_redder_than_background() {
        let data = generate(&ToyConfig { count: 20, ..ToyConfig::default() }).unwrap();
        let (mut fg, mut bg, mut nf, mut nb) = (0.0, 0.0, 0, 0);
        for s in &data {
            let (r, g, m) = (s.image.channel(0), s.image.channel(1), s.image.mask());
            for i in 0..m.len() {
                if m[i] > 0.0 {
                    fg += (r[i] - g[i]) as f64;
                    nf += 1;
                } else {
                    bg += (r[i] - g[i]) as f64;
                    nb += 1;
                }
            }
        }
        assert!(fg / nf as f64 > bg / nb as f64 + 0.2);
    }

    #[test]
    fn shifted_variant_changes_statistics() {
        let a = generate(&ToyConfig { count: 30, ..ToyConfig::default() }).unwrap();
        let b = generate(&ToyConfig { count: 30, shifted: true, ..ToyConfig::default() }).unwrap();
        let blue = |d: &[Sample]| d.iter().map(|s| s.image.channel(2).iter().sum::<f32>()).sum::<f32>();
        assert!((blue(&a) - blue(&b)).abs() > 100.0);
        assert!(b[0].id.starts_with("toys_"));
    }
}
