use super::Image;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// ε added to the variance before the square root in target normalization.
pub const NORM_EPS: f64 = 1e-6;

/// An image flattened into `N = (H/P)·(W/P)` tokens of width `D = P²·C`.
///
/// Tokens are in row-major patch order; inside a token, pixels are row-major
/// with channels interleaved (`(py·P + px)·C + c`).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    pub tokens: Matrix,
    pub patch_size: usize,
    pub grid: (usize, usize),
    pub channels: usize,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }
}

pub fn patchify(img: &Image, patch_size: usize) -> Result<PatchSequence> {
    let p = patch_size;
    if p == 0 || img.height % p != 0 || img.width % p != 0 {
        return Err(Error::config(format!(
            "image {}x{} is not divisible into {p}x{p} patches",
            img.height, img.width
        )));
    }
    let (gh, gw, c) = (img.height / p, img.width / p, img.channels);
    let d = p * p * c;
    let mut data = Vec::with_capacity(gh * gw * d);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..p {
                let start = img.index(gy * p + py, gx * p, 0);
                data.extend(img.data[start..start + p * c].iter().map(|&v| v as f64));
            }
        }
    }
    Ok(PatchSequence {
        tokens: Matrix::from_vec(gh * gw, d, data)?,
        patch_size: p,
        grid: (gh, gw),
        channels: c,
    })
}

pub fn unpatchify(seq: &PatchSequence) -> Result<Image> {
    let p = seq.patch_size;
    let (gh, gw) = seq.grid;
    let c = seq.channels;
    if seq.tokens.rows() != gh * gw || seq.tokens.cols() != p * p * c {
        return Err(Error::dim(format!(
            "{}x{} tokens do not match a {gh}x{gw} grid of {p}x{p}x{c} patches",
            seq.tokens.rows(),
            seq.tokens.cols()
        )));
    }
    let mut img = Image::zeros(gh * p, gw * p, c);
    for gy in 0..gh {
        for gx in 0..gw {
            let tok = seq.tokens.row(gy * gw + gx);
            for py in 0..p {
                let start = img.index(gy * p + py, gx * p, 0);
                for (k, v) in tok[py * p * c..(py + 1) * p * c].iter().enumerate() {
                    img.data[start + k] = *v as f32;
                }
            }
        }
    }
    Ok(img)
}

/// Mean and ε-guarded population standard deviation of a row.
pub fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, (var + NORM_EPS).sqrt())
}

/// Per-row zero-mean, unit-variance normalization of reconstruction targets.
pub fn normalize_targets(patches: &Matrix) -> Matrix {
    let mut out = patches.clone();
    for r in 0..out.rows() {
        let (mean, std) = row_stats(patches.row(r));
        for v in out.row_mut(r) {
            *v = (*v - mean) / std;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn token_counts() {
        let big = Image::zeros(224, 224, 3);
        let s = patchify(&big, 16).unwrap();
        assert_eq!((s.len(), s.dim()), (196, 768));
        let toy = Image::zeros(32, 32, 3);
        let s = patchify(&toy, 4).unwrap();
        assert_eq!((s.len(), s.dim()), (64, 48));
        assert!(matches!(patchify(&toy, 5), Err(Error::Config(_))));
    }

    #[test]
    fn constant_image_gives_constant_tokens() {
        let img = Image::from_vec(8, 8, 3, vec![0.25; 192]).unwrap();
        let s = patchify(&img, 4).unwrap();
        assert!(s.tokens.as_slice().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn patch_order_is_row_major() {
        // pixel value encodes its (y, x, c) position
        let mut img = Image::zeros(4, 4, 2);
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..2 {
                    img.set(y, x, c, (y * 100 + x * 10 + c) as f32);
                }
            }
        }
        let s = patchify(&img, 2).unwrap();
        // token 1 is the top-right patch: pixels (0,2),(0,3),(1,2),(1,3)
        assert_eq!(s.tokens.row(1), &[20.0, 21.0, 30.0, 31.0, 120.0, 121.0, 130.0, 131.0]);
    }

    #[test]
    fn normalize_hand_cases() {
        let m = Matrix::from_rows(&[vec![1.0, 3.0], vec![5.0, 5.0]]).unwrap();
        let n = normalize_targets(&m);
        assert!((n.get(0, 0) + 1.0).abs() < 1e-6 && (n.get(0, 1) - 1.0).abs() < 1e-6);
        assert_eq!(n.row(1), &[0.0, 0.0]);
        let twice = normalize_targets(&n);
        assert!(twice.max_abs_diff(&n) < 1e-6);
    }

    /// (mean, population std) of the normalized row plus the input's std.
    fn normalized_moments(row: &[f64]) -> (f64, f64, f64) {
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let std = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let out = normalize_targets(&Matrix::from_vec(1, row.len(), row.to_vec()).unwrap());
        let om = out.mean();
        let os = (out.as_slice().iter().map(|v| (v - om).powi(2)).sum::<f64>() / n).sqrt();
        (om, os, std)
    }

    proptest! {
        #[test]
        fn patchify_roundtrip(gh in 1usize..4, gw in 1usize..4, p in 1usize..5, c in 1usize..4,
                              seed in any::<u64>()) {
            let (h, w) = (gh * p, gw * p);
            let mut state = seed;
            let data = (0..h * w * c).map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 40) as f32 / (1u64 << 24) as f32
            }).collect();
            let img = Image::from_vec(h, w, c, data).unwrap();
            let seq = patchify(&img, p).unwrap();
            prop_assert_eq!(seq.len(), gh * gw);
            prop_assert_eq!(seq.dim(), p * p * c);
            prop_assert_eq!(unpatchify(&seq).unwrap(), img);
        }

        #[test]
        fn normalized_rows_are_standardized(row in proptest::collection::vec(-10.0f64..10.0, 2..40)) {
            let (om, os, std) = normalized_moments(&row);
            prop_assume!(std > 0.25);
            prop_assert!(om.abs() < 1e-5);
            prop_assert!((os - 1.0).abs() < 1e-5);
        }

        #[test]
        fn low_variance_rows_follow_eps_formula(scale in 1e-3f64..0.25,
                                                row in proptest::collection::vec(-1.0f64..1.0, 2..40)) {
            let row: Vec<f64> = row.iter().map(|v| v * scale).collect();
            let (om, os, std) = normalized_moments(&row);
            prop_assume!(std > 1e-3);
            prop_assert!(om.abs() < 1e-5);
            let expect = (std * std / (std * std + NORM_EPS)).sqrt();
            prop_assert!((os - expect).abs() < 1e-9);
        }
    }
}
