//! Random masking, visible/masked splitting and positional embeddings.

use rand::Rng;

use crate::dataio::PatchSequence;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// A partition of `0..n_total` into visible and masked token indices, both
/// sorted ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub n_total: usize,
    pub mask_ratio: f64,
    pub visible_idx: Vec<usize>,
    pub masked_idx: Vec<usize>,
}

/// Visible token count for `n` tokens at ratio `m`: `round((1-m)·n)`.
pub fn visible_count(n: usize, mask_ratio: f64) -> usize {
    ((1.0 - mask_ratio) * n as f64).round() as usize
}

impl MaskPlan {
    /// Builds a plan from an explicit visible set (any size, including all or
    /// none). Used by test rigs and by callers replaying a stored plan.
    pub fn from_visible(n_total: usize, visible: &[usize]) -> Result<Self> {
        let mut is_visible = vec![false; n_total];
        for &i in visible {
            if i >= n_total || is_visible[i] {
                return Err(Error::Input(format!(
                    "visible index {i} is out of range or repeated for {n_total} tokens"
                )));
            }
            is_visible[i] = true;
        }
        let (visible_idx, masked_idx): (Vec<usize>, Vec<usize>) = (0..n_total).partition(|&i| is_visible[i]);
        Ok(Self {
            n_total,
            mask_ratio: masked_idx.len() as f64 / n_total.max(1) as f64,
            visible_idx,
            masked_idx,
        })
    }

    pub fn n_visible(&self) -> usize {
        self.visible_idx.len()
    }

    pub fn n_masked(&self) -> usize {
        self.masked_idx.len()
    }

    /// `true` at every masked position.
    pub fn mask_flags(&self) -> Vec<bool> {
        let mut flags = vec![true; self.n_total];
        for &i in &self.visible_idx {
            flags[i] = false;
        }
        flags
    }
}

/// Uniformly random partition with `round((1-m)·N)` visible tokens.
pub fn sample_mask_plan(n: usize, mask_ratio: f64, rng: &mut impl Rng) -> Result<MaskPlan> {
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(Error::config(format!("mask ratio {mask_ratio} must lie in (0, 1)")));
    }
    if n < 2 {
        return Err(Error::config(format!("masking needs at least 2 tokens, got {n}")));
    }
    let n_visible = visible_count(n, mask_ratio);
    if n_visible == 0 || n_visible == n {
        return Err(Error::config(format!(
            "mask ratio {mask_ratio} on {n} tokens leaves {n_visible} visible; both groups must be non-empty"
        )));
    }
    let mut visible = rand::seq::index::sample(rng, n, n_visible).into_vec();
    visible.sort_unstable();
    let mut plan = MaskPlan::from_visible(n, &visible)?;
    plan.mask_ratio = mask_ratio;
    Ok(plan)
}

/// Gathers the visible rows and the masked rows of `seq`, each group in
/// ascending index order.
pub fn split_tokens(seq: &PatchSequence, plan: &MaskPlan) -> Result<(Matrix, Matrix)> {
    if seq.len() != plan.n_total {
        return Err(Error::dim(format!(
            "mask plan covers {} tokens but the sequence has {}",
            plan.n_total,
            seq.len()
        )));
    }
    Ok((
        seq.tokens.gather_rows(&plan.visible_idx)?,
        seq.tokens.gather_rows(&plan.masked_idx)?,
    ))
}

/// Merges encoded visible rows with copies of `mask_token` into the full
/// `N × D'` sequence in original token order.
pub fn reassemble(encoded_visible: &Matrix, mask_token: &Matrix, plan: &MaskPlan) -> Result<Matrix> {
    if encoded_visible.rows() != plan.n_visible() {
        return Err(Error::dim(format!(
            "{} encoded rows for a plan with {} visible tokens",
            encoded_visible.rows(),
            plan.n_visible()
        )));
    }
    if mask_token.rows() != 1 || mask_token.cols() != encoded_visible.cols() {
        return Err(Error::dim(format!(
            "mask token is {}x{}, expected 1x{}",
            mask_token.rows(),
            mask_token.cols(),
            encoded_visible.cols()
        )));
    }
    let stacked = Matrix::vstack(&[encoded_visible, mask_token])?;
    stacked.gather_rows(&reassembly_index(plan, 0, plan.n_visible()))
}

/// Row map from `[visible rows (offset..offset+N_v) | sentinel]` to original
/// order: position `i` reads its visible row if unmasked, else `sentinel`.
pub(crate) fn reassembly_index(plan: &MaskPlan, offset: usize, sentinel: usize) -> Vec<usize> {
    let mut idx = vec![sentinel; plan.n_total];
    for (k, &i) in plan.visible_idx.iter().enumerate() {
        idx[i] = offset + k;
    }
    idx
}

/// Fixed 2-D sine-cosine positional table.
///
/// Row 0 belongs to the class token and is all zeros; row `1 + t` holds token
/// `t = gy·w + gx`. The first half of the columns encodes `gx`, the second
/// half `gy`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEmbedding {
    pub table: Matrix,
}

impl PositionalEmbedding {
    /// Rows for the given token indices (without the class row).
    pub fn token_rows(&self, idx: &[usize]) -> Result<Matrix> {
        let shifted: Vec<usize> = idx.iter().map(|i| i + 1).collect();
        self.table.gather_rows(&shifted)
    }

    pub fn n_tokens(&self) -> usize {
        self.table.rows() - 1
    }
}

pub fn sincos_pos_embed(n: usize, dim: usize, grid: (usize, usize)) -> Result<PositionalEmbedding> {
    let (h, w) = grid;
    if h * w != n {
        return Err(Error::config(format!("grid {h}x{w} does not hold {n} tokens")));
    }
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::config(format!(
            "positional embedding width {dim} must be a positive multiple of 4"
        )));
    }
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut table = Matrix::zeros(n + 1, dim);
    for gy in 0..h {
        for gx in 0..w {
            let row = table.row_mut(1 + gy * w + gx);
            for (half, pos) in [gx as f64, gy as f64].into_iter().enumerate() {
                let base = half * dim / 2;
                for (i, om) in omega.iter().enumerate() {
                    row[base + i] = (pos * om).sin();
                    row[base + quarter + i] = (pos * om).cos();
                }
            }
        }
    }
    Ok(PositionalEmbedding { table })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(n: usize, d: usize) -> PatchSequence {
        PatchSequence {
            tokens: Matrix::from_fn(n, d, |r, c| (r * 10 + c) as f64),
            patch_size: 1,
            grid: (1, n),
            channels: d,
        }
    }

    #[test]
    fn plan_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = sample_mask_plan(196, 0.75, &mut rng).unwrap();
        assert_eq!((p.n_visible(), p.n_masked()), (49, 147));
        let p = sample_mask_plan(64, 0.75, &mut rng).unwrap();
        assert_eq!((p.n_visible(), p.n_masked()), (16, 48));
    }

    #[test]
    fn degenerate_ratios_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for m in [0.0, 1.0, 1.5, 0.99] {
            assert!(matches!(sample_mask_plan(4, m, &mut rng), Err(Error::Config(_))), "m={m}");
        }
        assert!(sample_mask_plan(1, 0.5, &mut rng).is_err());
    }

    #[test]
    fn plan_is_pure_in_rng_state() {
        let a = sample_mask_plan(64, 0.75, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_mask_plan(64, 0.75, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_gathers_in_order() {
        let s = seq(4, 2);
        let plan = MaskPlan::from_visible(4, &[1, 3]).unwrap();
        let (vis, masked) = split_tokens(&s, &plan).unwrap();
        assert_eq!(vis.row(0), s.tokens.row(1));
        assert_eq!(vis.row(1), s.tokens.row(3));
        assert_eq!(masked.row(0), s.tokens.row(0));
        let all = MaskPlan::from_visible(4, &[0, 1, 2, 3]).unwrap();
        assert_eq!(split_tokens(&s, &all).unwrap().0, s.tokens);
        let wrong = MaskPlan::from_visible(5, &[0]).unwrap();
        assert!(matches!(split_tokens(&s, &wrong), Err(Error::Dimension(_))));
    }

    #[test]
    fn split_then_scatter_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = seq(16, 3);
        let plan = sample_mask_plan(16, 0.6, &mut rng).unwrap();
        let (vis, masked) = split_tokens(&s, &plan).unwrap();
        let mut rebuilt = Matrix::zeros(16, 3);
        for (k, &i) in plan.visible_idx.iter().enumerate() {
            rebuilt.row_mut(i).copy_from_slice(vis.row(k));
        }
        for (k, &i) in plan.masked_idx.iter().enumerate() {
            rebuilt.row_mut(i).copy_from_slice(masked.row(k));
        }
        assert_eq!(rebuilt, s.tokens);
    }

    #[test]
    fn reassemble_cases() {
        let enc = Matrix::from_fn(4, 3, |r, c| (r + c) as f64 + 1.0);
        let token = Matrix::zeros(1, 3);
        let all = MaskPlan::from_visible(4, &[0, 1, 2, 3]).unwrap();
        assert_eq!(reassemble(&enc, &token, &all).unwrap(), enc);

        let one = MaskPlan::from_visible(4, &[0]).unwrap();
        let out = reassemble(&enc.gather_rows(&[0]).unwrap(), &token, &one).unwrap();
        assert_eq!(out.row(0), enc.row(0));
        assert!(out.as_slice()[3..].iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let plan = sample_mask_plan(12, 0.75, &mut rng).unwrap();
        let vis = Matrix::from_fn(plan.n_visible(), 3, |r, c| (r * 3 + c) as f64);
        let sentinel = Matrix::filled(1, 3, -7.0);
        let out = reassemble(&vis, &sentinel, &plan).unwrap();
        for (k, &i) in plan.visible_idx.iter().enumerate() {
            assert_eq!(out.row(i), vis.row(k));
        }
        let masked = out.gather_rows(&plan.masked_idx).unwrap();
        assert_eq!(masked.rows(), plan.n_masked());
        assert!(masked.as_slice().iter().all(|&v| v == -7.0));
        assert!(matches!(reassemble(&enc, &token, &plan), Err(Error::Dimension(_))));
    }

    #[test]
    fn positional_table_properties() {
        let pe = sincos_pos_embed(16, 8, (4, 4)).unwrap();
        assert_eq!(pe.table.shape(), (17, 8));
        assert!(pe.table.row(0).iter().all(|&v| v == 0.0));
        assert!(pe.table.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(pe, sincos_pos_embed(16, 8, (4, 4)).unwrap());
        assert!(sincos_pos_embed(16, 6, (4, 4)).is_err());
        assert!(sincos_pos_embed(15, 8, (4, 4)).is_err());
    }

    #[test]
    fn positional_rows_are_distinct() {
        for (grid, dim) in [((4, 4), 4), ((3, 5), 8), ((8, 8), 4)] {
            let n = grid.0 * grid.1;
            let pe = sincos_pos_embed(n, dim, grid).unwrap();
            for a in 1..=n {
                for b in a + 1..=n {
                    assert_ne!(pe.table.row(a), pe.table.row(b), "rows {a} and {b} collide");
                }
            }
        }
    }
}
