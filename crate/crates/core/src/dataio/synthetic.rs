//! Deterministic procedural corpus for desk-scale runs. Not a real dataset.
//!
//! Class `k` draws from texture family `k % 4` (horizontal stripes, vertical
//! stripes, concentric rings, checkerboard) at frequency band `k / 4`. Every
//! image gets its own colours, phase, frequency jitter, a soft distractor blob
//! and pixel noise, so the classes are separable by structure only.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Image, ImageRecord};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub resolution: usize,
    pub seed: u64,
}

/// Generates `classes · per_class` records, labels cycling `0, 1, …, classes-1`.
pub fn gen_synthetic(spec: &SyntheticSpec, patch_size: usize) -> Result<Vec<ImageRecord>> {
    if spec.classes < 2 {
        return Err(Error::config(format!(
            "synthetic corpus needs at least 2 classes, got {}",
            spec.classes
        )));
    }
    if patch_size == 0 || spec.resolution == 0 || spec.resolution % patch_size != 0 {
        return Err(Error::config(format!(
            "resolution {} is not divisible by patch size {patch_size}",
            spec.resolution
        )));
    }
    let total = spec.classes * spec.per_class;
    Ok((0..total)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let label = i % spec.classes;
            ImageRecord {
                pixels: render(label, spec.resolution, &mut rng),
                label,
                source_id: i as u64,
            }
        })
        .collect())
}

fn random_colour(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn render(label: usize, size: usize, rng: &mut ChaCha8Rng) -> Image {
    let family = label % 4;
    let band = (label / 4) as f64;
    let freq = (1.5 + 1.5 * band) * rng.random_range(0.85..1.15);
    let phase = rng.random_range(0.0..TAU);
    let phase2 = rng.random_range(0.0..TAU);
    let tilt = rng.random_range(-0.15..0.15f64);
    let (cx, cy) = (rng.random_range(0.25..0.75), rng.random_range(0.25..0.75));

    let bg = random_colour(rng);
    let mut fg = random_colour(rng);
    // keep enough contrast for the texture to carry the label
    let contrast: f64 = (0..3).map(|c| (fg[c] - bg[c]).abs()).sum::<f64>() / 3.0;
    if contrast < 0.3 {
        for c in 0..3 {
            fg[c] = if bg[c] > 0.5 { bg[c] - 0.45 } else { bg[c] + 0.45 };
        }
    }

    let blob = random_colour(rng);
    let (bx, by) = (rng.random::<f64>(), rng.random::<f64>());
    let br = rng.random_range(0.08..0.18);

    let mut img = Image::zeros(size, size, 3);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64;
            let v = (y as f64 + 0.5) / size as f64;
            let s = match family {
                0 => (TAU * freq * (v + tilt * u) + phase).sin(),
                1 => (TAU * freq * (u + tilt * v) + phase).sin(),
                2 => {
                    let r = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt();
                    (TAU * 1.5 * freq * r + phase).sin()
                }
                _ => (TAU * freq * u + phase).sin() * (TAU * freq * v + phase2).sin(),
            };
            let s = 0.5 + 0.5 * s;
            let d2 = ((u - bx).powi(2) + (v - by).powi(2)) / (br * br);
            let blob_w = (-d2).exp() * 0.6;
            for c in 0..3 {
                let base = bg[c] * (1.0 - s) + fg[c] * s;
                let noise = (rng.random::<f64>() - 0.5) * 0.06;
                let value = base * (1.0 - blob_w) + blob[c] * blob_w + noise;
                img.set(y, x, c, value.clamp(0.0, 1.0) as f32);
            }
        }
    }
    img
}
