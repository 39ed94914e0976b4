//! Reconstruction triptychs: original | masked | prediction, side by side.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdmae::dataio::{patchify, row_stats, unpatchify, Image};
use sdmae::masking::{reassemble, sample_mask_plan, MaskPlan};
use sdmae::model::{Sdmae, MASK_TOKEN};
use sdmae::trainer::mix_seed;
use sdmae::{Error, Matrix, ParamStore, Result};

/// Fill value of masked patches in the middle panel.
pub const GRAY: f32 = 0.5;

/// Mask plan for the `index`-th reconstructed image.
pub fn plan_for(model: &Sdmae, mask_ratio: f64, seed: u64, index: usize) -> Result<MaskPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 2, index as u64));
    sample_mask_plan(model.config().n_tokens(), mask_ratio, &mut rng)
}

/// Pixel predictions for every masked patch, mapped back to pixel space with
/// the true patch mean and standard deviation and clamped to `[0, 1]`.
pub fn predict_masked(model: &Sdmae, params: &ParamStore, img: &Image, plan: &MaskPlan) -> Result<Matrix> {
    let seq = patchify(img, model.config().encoder.patch_size)?;
    let visible = seq.tokens.gather_rows(&plan.visible_idx)?;
    let pos = model.pos_embed().token_rows(&plan.visible_idx)?;
    let enc = model.encode_visible(params, &visible, &pos)?;
    let cls = enc.gather_rows(&[0])?;
    let rest = enc.gather_rows(&(1..enc.rows()).collect::<Vec<_>>())?;
    let mask = params
        .get(MASK_TOKEN)
        .ok_or_else(|| Error::Parameter(format!("checkpoint lacks `{MASK_TOKEN}`")))?;
    let merged = reassemble(&rest, mask, plan)?;
    let (_, pixels) = model.decode_all(params, &Matrix::vstack(&[&cls, &merged])?)?;
    let mut out = pixels.gather_rows(&plan.masked_idx)?;
    for (r, &j) in plan.masked_idx.iter().enumerate() {
        let (mean, std) = row_stats(seq.tokens.row(j));
        for v in out.row_mut(r) {
            *v = (*v * std + mean).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Replaces the masked patches of `img` with `rows`, one row per masked index.
fn with_patches(img: &Image, patch_size: usize, plan: &MaskPlan, rows: &Matrix) -> Result<Image> {
    let mut seq = patchify(img, patch_size)?;
    for (r, &j) in plan.masked_idx.iter().enumerate() {
        seq.tokens.row_mut(j).copy_from_slice(rows.row(r));
    }
    unpatchify(&seq)
}

/// Three panels of the input's size, concatenated horizontally.
pub fn triptych(model: &Sdmae, params: &ParamStore, img: &Image, plan: &MaskPlan) -> Result<Image> {
    let p = model.config().encoder.patch_size;
    let gray = Matrix::filled(plan.n_masked(), p * p * img.channels, GRAY as f64);
    let masked = with_patches(img, p, plan, &gray)?;
    let predicted = with_patches(img, p, plan, &predict_masked(model, params, img, plan)?)?;
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut out = Image::zeros(h, 3 * w, c);
    for (k, panel) in [img, &masked, &predicted].into_iter().enumerate() {
        for y in 0..h {
            let src = &panel.data[panel.index(y, 0, 0)..panel.index(y, 0, 0) + w * c];
            let start = out.index(y, k * w, 0);
            out.data[start..start + w * c].copy_from_slice(src);
        }
    }
    Ok(out)
}

/// 8-bit RGB samples; single-channel images are replicated.
pub fn to_rgb8(img: &Image) -> Result<Vec<u8>> {
    if img.channels != 1 && img.channels != 3 {
        return Err(Error::Input(format!("cannot write a {}-channel image", img.channels)));
    }
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Ok(if img.channels == 3 {
        img.data.iter().map(|&v| q(v)).collect()
    } else {
        img.data.iter().flat_map(|&v| [q(v); 3]).collect()
    })
}

/// Binary PPM (P6).
pub fn encode_ppm(img: &Image) -> Result<Vec<u8>> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(to_rgb8(img)?);
    Ok(out)
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let fail = |e: png::EncodingError| Error::Input(format!("png encoding failed: {e}"));
        let mut w = enc.write_header().map_err(fail)?;
        w.write_image_data(&to_rgb8(img)?).map_err(fail)?;
    }
    Ok(out)
}

/// Parses a P6 file written by [`encode_ppm`]: `(width, height, samples)`.
pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::Format {
        offset: 0,
        message: m.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PPM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII PPM header"))?);
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("not an 8-bit P6 file"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PPM dimensions"));
    let (w, h) = (num(fields[1])?, num(fields[2])?);
    let data = bytes.get(pos + 1..).unwrap_or_default();
    if data.len() != w * h * 3 {
        return Err(bad("PPM sample count does not match its header"));
    }
    Ok((w, h, data.to_vec()))
}

pub fn write_image(path: &Path, img: &Image, png: bool) -> Result<()> {
    let bytes = if png { encode_png(img)? } else { encode_ppm(img)? };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Patches of the middle panel whose pixels all equal [`GRAY`] after 8-bit
/// quantization.
pub fn count_gray_patches(rgb: &[u8], width: usize, panel: usize, patch: usize) -> usize {
    let g = (GRAY * 255.0).round() as u8;
    let grid = panel / patch;
    let mut count = 0;
    for gy in 0..grid {
        for gx in 0..grid {
            let all_gray = (0..patch).all(|py| {
                (0..patch).all(|px| {
                    let (y, x) = (gy * patch + py, panel + gx * patch + px);
                    rgb[(y * width + x) * 3..(y * width + x) * 3 + 3].iter().all(|&v| v == g)
                })
            });
            count += all_gray as usize;
        }
    }
    count
}
