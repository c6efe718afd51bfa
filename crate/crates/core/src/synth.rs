//! Deterministic synthetic scenes for tests, benches and smoke runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imaging::{Image, CHANNELS};

/// A seeded "natural-ish" scene: smooth color gradients plus a handful of
/// rectangles and disks with soft edges. Values stay within [-0.9, 0.9] so
/// blur and noise have headroom before clipping.
pub fn test_card(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::new(height, width);

    let freq: Vec<(f64, f64, f64)> = (0..CHANNELS)
        .map(|_| {
            (
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..2.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    for c in 0..CHANNELS {
        let (fy, fx, ph) = freq[c];
        for y in 0..height {
            for x in 0..width {
                let u = y as f64 / height as f64;
                let v = x as f64 / width as f64;
                let s = 0.35 * (std::f64::consts::TAU * (fy * u + fx * v) + ph).sin()
                    + 0.25 * (u - 0.5)
                    - 0.2 * (v - 0.5);
                img.set(c, y, x, s as f32);
            }
        }
    }

    let shapes = 6;
    for _ in 0..shapes {
        let cy = rng.random_range(0.0..height as f64);
        let cx = rng.random_range(0.0..width as f64);
        let radius = rng.random_range(0.08..0.22) * height.min(width) as f64;
        let color: Vec<f64> = (0..CHANNELS).map(|_| rng.random_range(-0.8..0.8)).collect();
        let rect = rng.random_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let dy = (y as f64 - cy).abs();
                let dx = (x as f64 - cx).abs();
                let d = if rect { dy.max(dx) } else { (dy * dy + dx * dx).sqrt() };
                // Soft 1.5-px falloff keeps edges sharp but not aliased.
                let t = ((radius - d) / 1.5).clamp(0.0, 1.0);
                if t > 0.0 {
                    for c in 0..CHANNELS {
                        let cur = img.get(c, y, x) as f64;
                        img.set(c, y, x, (cur * (1.0 - t) + color[c] * t) as f32);
                    }
                }
            }
        }
    }

    for v in img.samples_mut() {
        *v = v.clamp(-0.9, 0.9);
    }
    img
}
