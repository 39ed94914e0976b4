//! Strong/weak view generation for the two-view objectives.
//!
//! The strong pipeline follows the MoCo v3 family: random resized crop,
//! colour jitter, grayscale, Gaussian blur, solarize and horizontal flip. The
//! weak pipeline keeps the crop and flip only.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Image, ImageRecord};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for ColorJitter {
    fn default() -> Self {
        Self {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
        }
    }
}

/// One augmentation pipeline. Probabilities of 0 disable a stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineSpec {
    /// Area fraction range of the random resized crop.
    pub crop_scale: (f64, f64),
    /// Aspect-ratio range of the crop (sampled log-uniformly).
    pub crop_ratio: (f64, f64),
    pub flip_p: f64,
    pub jitter_p: f64,
    pub jitter: ColorJitter,
    pub gray_p: f64,
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
    pub solarize_p: f64,
}

impl PipelineSpec {
    pub fn strong() -> Self {
        Self {
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.5,
            jitter_p: 0.8,
            jitter: ColorJitter::default(),
            gray_p: 0.2,
            blur_p: 0.5,
            blur_sigma: (0.1, 2.0),
            solarize_p: 0.2,
        }
    }

    pub fn weak() -> Self {
        Self {
            crop_scale: (0.5, 1.0),
            jitter_p: 0.0,
            gray_p: 0.0,
            blur_p: 0.0,
            solarize_p: 0.0,
            ..Self::strong()
        }
    }

    /// Full-frame crop, every stage off.
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            flip_p: 0.0,
            ..Self::weak()
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::config(format!("{name}: crop scale range ({lo}, {hi}) is empty")));
        }
        if hi > 1.0 {
            return Err(Error::config(format!(
                "{name}: crop window larger than image (scale up to {hi})"
            )));
        }
        let (rlo, rhi) = self.crop_ratio;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(Error::config(format!("{name}: crop ratio range ({rlo}, {rhi}) is empty")));
        }
        for (p, label) in [
            (self.flip_p, "flip"),
            (self.jitter_p, "jitter"),
            (self.gray_p, "grayscale"),
            (self.blur_p, "blur"),
            (self.solarize_p, "solarize"),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name}: {label} probability {p} outside [0,1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPolicy {
    /// Side of the square output views; `None` keeps the source size.
    pub out_size: Option<usize>,
    pub strong: PipelineSpec,
    pub weak: PipelineSpec,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            out_size: None,
            strong: PipelineSpec::strong(),
            weak: PipelineSpec::weak(),
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            out_size: None,
            strong: PipelineSpec::identity(),
            weak: PipelineSpec::identity(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPair {
    pub strong: Image,
    pub weak: Image,
    pub seed: u64,
}

/// Derives both views of `img` from `seed`. Strong and weak use separate
/// streams of the same generator, so either view is reproducible alone.
pub fn augment_pair(img: &ImageRecord, policy: &AugmentPolicy, seed: u64) -> Result<AugmentedPair> {
    policy.strong.validate("strong")?;
    policy.weak.validate("weak")?;
    let src = &img.pixels;
    let out = policy.out_size.unwrap_or(src.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let strong = apply(src, &policy.strong, out, &mut rng);
    rng.set_stream(1);
    rng.set_word_pos(0);
    let weak = apply(src, &policy.weak, out, &mut rng);
    Ok(AugmentedPair { strong, weak, seed })
}

/// One pipeline on its own, as used for fine-tuning augmentation.
pub fn apply_pipeline(src: &Image, spec: &PipelineSpec, out: usize, rng: &mut ChaCha8Rng) -> Result<Image> {
    spec.validate("pipeline")?;
    if out == 0 {
        return Err(Error::config("output size must be positive"));
    }
    Ok(apply(src, spec, out, rng))
}

fn apply(src: &Image, spec: &PipelineSpec, out: usize, rng: &mut ChaCha8Rng) -> Image {
    let (y0, x0, h, w) = sample_crop(src.height, src.width, spec, rng);
    let mut img = resize_crop(src, y0, x0, h, w, out);
    let colour = img.channels == 3;
    if rng.random::<f64>() < spec.jitter_p && colour {
        color_jitter(&mut img, &spec.jitter, rng);
    }
    if rng.random::<f64>() < spec.gray_p && colour {
        grayscale(&mut img);
    }
    if rng.random::<f64>() < spec.blur_p {
        let sigma = rng.random_range(spec.blur_sigma.0..=spec.blur_sigma.1);
        img = gaussian_blur(&img, sigma);
    }
    if rng.random::<f64>() < spec.solarize_p {
        for v in &mut img.data {
            if *v >= 0.5 {
                *v = 1.0 - *v;
            }
        }
    }
    if rng.random::<f64>() < spec.flip_p {
        img = img.flip_horizontal();
    }
    img
}

/// Random resized crop box `(y, x, h, w)`, with the usual ten attempts and a
/// centre-crop fallback.
fn sample_crop(height: usize, width: usize, spec: &PipelineSpec, rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    if spec.crop_scale == (1.0, 1.0) && spec.crop_ratio == (1.0, 1.0) && height == width {
        return (0, 0, height, width);
    }
    let area = (height * width) as f64;
    let (lr_lo, lr_hi) = (spec.crop_ratio.0.ln(), spec.crop_ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(spec.crop_scale.0..=spec.crop_scale.1);
        let ratio = rng.random_range(lr_lo..=lr_hi).exp();
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let y = rng.random_range(0..=height - h);
            let x = rng.random_range(0..=width - w);
            return (y, x, h, w);
        }
    }
    let in_ratio = width as f64 / height as f64;
    let (h, w) = if in_ratio < spec.crop_ratio.0 {
        let w = width;
        (((w as f64) / spec.crop_ratio.0).round() as usize, w)
    } else if in_ratio > spec.crop_ratio.1 {
        let h = height;
        (h, ((h as f64) * spec.crop_ratio.1).round() as usize)
    } else {
        (height, width)
    };
    ((height - h) / 2, (width - w) / 2, h, w)
}

/// Bilinear resample of the crop box to `out × out` (pixel-centre aligned).
fn resize_crop(src: &Image, y0: usize, x0: usize, h: usize, w: usize, out: usize) -> Image {
    let c = src.channels;
    if h == out && w == out {
        let mut img = Image::zeros(out, out, c);
        for y in 0..out {
            let s = src.index(y0 + y, x0, 0);
            let d = img.index(y, 0, 0);
            img.data[d..d + out * c].copy_from_slice(&src.data[s..s + out * c]);
        }
        return img;
    }
    let mut img = Image::zeros(out, out, c);
    let sy = h as f64 / out as f64;
    let sx = w as f64 / out as f64;
    for y in 0..out {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let (iy, ty) = (fy.floor() as usize, fy - fy.floor());
        let iy1 = (iy + 1).min(h - 1);
        for x in 0..out {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let (ix, tx) = (fx.floor() as usize, fx - fx.floor());
            let ix1 = (ix + 1).min(w - 1);
            for ch in 0..c {
                let p00 = src.get(y0 + iy, x0 + ix, ch) as f64;
                let p01 = src.get(y0 + iy, x0 + ix1, ch) as f64;
                let p10 = src.get(y0 + iy1, x0 + ix, ch) as f64;
                let p11 = src.get(y0 + iy1, x0 + ix1, ch) as f64;
                let top = p00 + (p01 - p00) * tx;
                let bot = p10 + (p11 - p10) * tx;
                img.set(y, x, ch, (top + (bot - top) * ty) as f32);
            }
        }
    }
    img
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn grayscale(img: &mut Image) {
    for px in img.data.chunks_exact_mut(3) {
        let l = luma(px[0], px[1], px[2]);
        px.fill(l);
    }
}

fn color_jitter(img: &mut Image, cj: &ColorJitter, rng: &mut ChaCha8Rng) {
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    let factor = |rng: &mut ChaCha8Rng, amount: f64| -> f32 {
        if amount > 0.0 {
            rng.random_range((1.0 - amount).max(0.0)..=1.0 + amount) as f32
        } else {
            1.0
        }
    };
    for op in order {
        match op {
            0 => {
                let b = factor(rng, cj.brightness);
                for v in &mut img.data {
                    *v = (*v * b).clamp(0.0, 1.0);
                }
            }
            1 => {
                let c = factor(rng, cj.contrast);
                let n = (img.data.len() / 3) as f32;
                let mean = img.data.chunks_exact(3).map(|p| luma(p[0], p[1], p[2])).sum::<f32>() / n;
                for v in &mut img.data {
                    *v = ((*v - mean) * c + mean).clamp(0.0, 1.0);
                }
            }
            2 => {
                let s = factor(rng, cj.saturation);
                for px in img.data.chunks_exact_mut(3) {
                    let l = luma(px[0], px[1], px[2]);
                    for v in px.iter_mut() {
                        *v = ((*v - l) * s + l).clamp(0.0, 1.0);
                    }
                }
            }
            _ => {
                if cj.hue > 0.0 {
                    let shift = rng.random_range(-cj.hue..=cj.hue) as f32;
                    for px in img.data.chunks_exact_mut(3) {
                        let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
                        let (r, g, b) = hsv_to_rgb((h + shift).rem_euclid(1.0), s, v);
                        px.copy_from_slice(&[r, g, b]);
                    }
                }
            }
        }
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (i as i32).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Separable Gaussian blur with a kernel about a tenth of the image side
/// (minimum 3 taps), clamped at the borders.
fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let side = img.height.max(img.width);
    let mut ksize = (side / 10).max(3);
    if ksize % 2 == 0 {
        ksize += 1;
    }
    let radius = ksize / 2;
    let weights: Vec<f64> = (0..ksize)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let norm: f64 = weights.iter().sum();
    let weights: Vec<f32> = weights.iter().map(|w| (w / norm) as f32).collect();
    let pass = |src: &Image, horizontal: bool| {
        let mut out = Image::zeros(src.height, src.width, src.channels);
        for y in 0..src.height {
            for x in 0..src.width {
                for c in 0..src.channels {
                    let mut acc = 0f32;
                    for (k, w) in weights.iter().enumerate() {
                        let off = k as isize - radius as isize;
                        let (yy, xx) = if horizontal {
                            (y, (x as isize + off).clamp(0, src.width as isize - 1) as usize)
                        } else {
                            ((y as isize + off).clamp(0, src.height as isize - 1) as usize, x)
                        };
                        acc += w * src.get(yy, xx, c);
                    }
                    out.set(y, x, c, acc.clamp(0.0, 1.0));
                }
            }
        }
        out
    };
    pass(&pass(img, true), false)
}
