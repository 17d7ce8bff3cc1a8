//! Procedural source images shared by the integration tests.

#![allow(dead_code)]

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unreflect::imgcore::{write_png, EncodedImage};

/// Smooth random image: a few low-frequency sinusoids per channel plus a ramp.
pub fn smooth_image(height: usize, width: usize, seed: u64) -> EncodedImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(3 * height * width);
    for _ in 0..3 {
        let waves: Vec<[f64; 4]> = (0..3)
            .map(|_| {
                [
                    rng.random_range(0.5..4.0),
                    rng.random_range(0.5..4.0),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.05..0.2),
                ]
            })
            .collect();
        let base = rng.random_range(0.2..0.6);
        let ramp = rng.random_range(-0.2..0.2);
        for y in 0..height {
            for x in 0..width {
                let (u, v) = (x as f64 / width as f64, y as f64 / height as f64);
                let mut s = base + ramp * (u - v);
                for &[fx, fy, ph, amp] in &waves {
                    s += amp * (std::f64::consts::TAU * (fx * u + fy * v) + ph).sin();
                }
                data.push(s.clamp(0.0, 1.0));
            }
        }
    }
    EncodedImage::from_planar(height, width, data).unwrap()
}

/// Writes `count` smooth PNGs named `img_<i>.png` into `dir`.
pub fn write_sources(dir: &Path, count: usize, height: usize, width: usize, seed: u64) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..count {
        let img = smooth_image(height, width, seed.wrapping_mul(1000).wrapping_add(i as u64));
        write_png(&img, &dir.join(format!("img_{i:03}.png"))).unwrap();
    }
}
