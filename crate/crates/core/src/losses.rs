//! Reconstruction, location, contrastive and combined objectives.
//!
//! The differentiable terms record onto a [`Graph`]; the scalar bookkeeping
//! (`total_loss`, `location_accuracy`) works on plain values.

use crate::autograd::{softmax_rows, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_l: f64,
    pub lambda_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_l: 1.0,
            lambda_c: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_l >= 0.0 && self.lambda_c >= 0.0) {
            return Err(Error::config(format!(
                "loss weights must be non-negative, got lambda_l={} lambda_c={}",
                self.lambda_l, self.lambda_c
            )));
        }
        Ok(())
    }
}

/// Unweighted terms plus their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub loc: f64,
    pub ctr: f64,
    pub total: f64,
}

/// Mean squared error over every element.
pub fn mse(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    if g.value(pred).shape() != g.value(target).shape() || g.value(pred).is_empty() {
        let (p, t) = (g.value(pred), g.value(target));
        return Err(Error::dim(format!(
            "mse: prediction {}x{} vs target {}x{}",
            p.rows(),
            p.cols(),
            t.rows(),
            t.cols()
        )));
    }
    let d = g.sub(pred, target)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Per-view MSE on the masked rows, summed over the two views.
pub fn recon_loss(g: &mut Graph, pred_s: Var, pred_w: Var, target_s: Var, target_w: Var) -> Result<Var> {
    let s = mse(g, pred_s, target_s)?;
    let w = mse(g, pred_w, target_w)?;
    g.add(s, w)
}

fn check_targets(targets: &[usize], rows: usize, classes: usize) -> Result<()> {
    if targets.len() != rows || rows == 0 {
        return Err(Error::dim(format!("{} location targets for {rows} rows", targets.len())));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::Input(format!(
            "location target {t} out of range for {classes} positions"
        )));
    }
    Ok(())
}

/// Soft-argmax regression of grid positions.
///
/// Each row's expected index under `softmax(logits / tau_loc)` is compared to
/// its target, both divided by `L`, and the squared errors are averaged.
pub fn location_loss(g: &mut Graph, logits: Var, targets: &[usize], tau_loc: f64) -> Result<Var> {
    if !(tau_loc > 0.0) {
        return Err(Error::config(format!("tau_loc must be positive, got {tau_loc}")));
    }
    let (rows, l) = g.value(logits).shape();
    check_targets(targets, rows, l)?;
    let scaled = g.scale(logits, 1.0 / tau_loc);
    let p = g.softmax_rows(scaled);
    let inv = 1.0 / l as f64;
    let positions = g.constant(Matrix::from_fn(l, 1, |j, _| j as f64 * inv));
    let predicted = g.matmul(p, positions)?;
    let t = g.constant(Matrix::from_fn(rows, 1, |r, _| targets[r] as f64 * inv));
    let d = g.sub(predicted, t)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Expected index of each row under `softmax(logits / tau_loc)`, unscaled.
pub fn soft_argmax_positions(logits: &Matrix, tau_loc: f64) -> Vec<f64> {
    let p = softmax_rows(&logits.map(|v| v / tau_loc));
    (0..p.rows())
        .map(|r| p.row(r).iter().enumerate().map(|(j, v)| j as f64 * v).sum())
        .collect()
}

/// Hard argmax per row; the lowest index wins ties.
pub fn argmax_rows(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of rows whose hard argmax equals the target.
pub fn location_accuracy(logits: &Matrix, targets: &[usize]) -> Result<f64> {
    check_targets(targets, logits.rows(), logits.cols())?;
    let hits = argmax_rows(logits).iter().zip(targets).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / targets.len() as f64)
}

/// Symmetric in-batch InfoNCE between the views.
///
/// Row `i` of `q_s` is scored against every row of `k_w` with the diagonal as
/// the positive, and likewise `q_w` against `k_s`. The two cross-entropies are
/// summed; each is already a batch mean. Keys are detached here as well.
pub fn contrastive_loss(g: &mut Graph, q_s: Var, q_w: Var, k_s: Var, k_w: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::config(format!("contrastive temperature must be positive, got {tau}")));
    }
    let shape = g.value(q_s).shape();
    for v in [q_w, k_s, k_w] {
        if g.value(v).shape() != shape {
            return Err(Error::dim(format!(
                "contrastive inputs disagree: {}x{} vs {}x{}",
                shape.0,
                shape.1,
                g.value(v).rows(),
                g.value(v).cols()
            )));
        }
    }
    if shape.0 == 0 {
        return Err(Error::dim("contrastive loss needs at least one sample"));
    }
    let diag: Vec<usize> = (0..shape.0).collect();
    let term = |g: &mut Graph, q: Var, k: Var| -> Result<Var> {
        let k = g.detach(k);
        let kt = g.transpose(k);
        let sim = g.matmul(q, kt)?;
        let logits = g.scale(sim, 1.0 / tau);
        g.cross_entropy(logits, diag.clone())
    };
    let a = term(g, q_s, k_w)?;
    let b = term(g, q_w, k_s)?;
    g.add(a, b)
}

/// `recon + λ_l·loc + λ_c·ctr`, rejecting non-finite terms.
pub fn total_loss(recon: f64, loc: f64, ctr: f64, w: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [("recon", recon), ("loc", loc), ("ctr", ctr)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} loss is {v}")));
        }
    }
    w.validate()?;
    // fused multiply-adds keep one rounding per weighted term
    let total = w.lambda_c.mul_add(ctr, w.lambda_l.mul_add(loc, recon));
    Ok(LossBreakdown { recon, loc, ctr, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central differences on 16 random entries of `x`.
    fn check_grad(x: &Matrix, f: impl Fn(&mut Graph, Var) -> Var, rng: &mut impl Rng) {
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let out = f(&mut g, v);
        let grads = g.backward(out);
        let analytic = grads.get(v).unwrap().clone();
        let eval = |m: Matrix| {
            let mut g = Graph::new();
            let v = g.constant(m);
            let out = f(&mut g, v);
            g.value(out).item()
        };
        let h = 1e-5;
        for _ in 0..16 {
            let i = rng.random_range(0..x.len());
            let mut plus = x.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = x.clone();
            minus.as_mut_slice()[i] -= h;
            let numeric = (eval(plus) - eval(minus)) / (2.0 * h);
            let a = analytic.as_slice()[i];
            let scale = a.abs().max(numeric.abs());
            assert!(
                (a - numeric).abs() <= 1e-3 * scale + 1e-9,
                "entry {i}: analytic {a} numeric {numeric}"
            );
        }
    }

    #[test]
    fn recon_examples() {
        let mut g = Graph::new();
        let t = g.constant(Matrix::from_rows(&[vec![-1.0, 1.0]]).unwrap());
        let zero = g.constant(Matrix::zeros(1, 2));
        let exact = recon_loss(&mut g, t, t, t, t).unwrap();
        assert_eq!(g.value(exact).item(), 0.0);
        let one = recon_loss(&mut g, zero, t, t, t).unwrap();
        assert_eq!(g.value(one).item(), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (p, q) = (random(3, 4, &mut rng), random(3, 4, &mut rng));
        let (ts, tw) = (random(3, 4, &mut rng), random(3, 4, &mut rng));
        let doubled = |m: &Matrix, t: &Matrix| m.zip_map(t, |a, b| b + 2.0 * (a - b)).unwrap();
        let vals: Vec<f64> = [(p.clone(), q.clone()), (doubled(&p, &ts), doubled(&q, &tw))]
            .into_iter()
            .map(|(a, b)| {
                let mut g = Graph::new();
                let vars = [a, b, ts.clone(), tw.clone()].map(|m| g.constant(m));
                let l = recon_loss(&mut g, vars[0], vars[1], vars[2], vars[3]).unwrap();
                g.value(l).item()
            })
            .collect();
        assert!((vals[1] - 4.0 * vals[0]).abs() < 1e-12);

        // view symmetry
        let mut g = Graph::new();
        let vars = [p, q, ts, tw].map(|m| g.constant(m));
        let a = recon_loss(&mut g, vars[0], vars[1], vars[2], vars[3]).unwrap();
        let b = recon_loss(&mut g, vars[1], vars[0], vars[3], vars[2]).unwrap();
        assert!((g.value(a).item() - g.value(b).item()).abs() < 1e-15);

        let wrong = g.constant(Matrix::zeros(2, 4));
        assert!(matches!(recon_loss(&mut g, wrong, vars[1], vars[2], vars[3]), Err(Error::Dimension(_))));
    }

    #[test]
    fn soft_argmax_examples() {
        let p = soft_argmax_positions(&Matrix::from_rows(&[vec![2.0, 0.0, 0.0, 0.0]]).unwrap(), 1.0);
        let e2 = 2f64.exp();
        let oracle = (1.0 + 2.0 + 3.0) / (e2 + 3.0);
        assert!((p[0] - oracle).abs() < 1e-12);
        assert!((p[0] - 0.5777).abs() < 5e-4);

        let uniform = Matrix::zeros(2, 2);
        for t in [0, 1] {
            assert_eq!(soft_argmax_positions(&uniform, 1.0)[0], 0.5);
            let mut g = Graph::new();
            let l = g.constant(uniform.clone());
            let loss = location_loss(&mut g, l, &[t, t], 1.0).unwrap();
            assert!((g.value(loss).item() - 0.0625).abs() < 1e-15);
        }

        let mut sharp = Matrix::zeros(3, 5);
        for (r, t) in [1, 4, 0].into_iter().enumerate() {
            sharp.set(r, t, 60.0);
        }
        let mut g = Graph::new();
        let l = g.constant(sharp);
        let loss = location_loss(&mut g, l, &[1, 4, 0], 1.0).unwrap();
        assert!(g.value(loss).item() < 1e-20);
    }

    #[test]
    fn location_errors_and_accuracy() {
        let mut g = Graph::new();
        let l = g.constant(Matrix::zeros(2, 4));
        assert!(matches!(location_loss(&mut g, l, &[0, 4], 1.0), Err(Error::Input(_))));
        assert!(matches!(location_loss(&mut g, l, &[0, 1], 0.0), Err(Error::Config(_))));

        let logits = Matrix::from_rows(&[vec![1.0, 3.0, 3.0], vec![0.5, 0.1, 0.2], vec![0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(argmax_rows(&logits), [1, 0, 0]);
        let acc = location_accuracy(&logits, &[1, 2, 0]).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-15);
        let rescaled = logits.map(|v| v * 7.5);
        assert_eq!(location_accuracy(&rescaled, &[1, 2, 0]).unwrap(), acc);
    }

    fn contrastive_value(q_s: &Matrix, q_w: &Matrix, k_s: &Matrix, k_w: &Matrix, tau: f64) -> f64 {
        let mut g = Graph::new();
        let v = [q_s, q_w, k_s, k_w].map(|m| g.constant(m.clone()));
        let l = contrastive_loss(&mut g, v[0], v[1], v[2], v[3], tau).unwrap();
        g.value(l).item()
    }

    #[test]
    fn contrastive_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let unit = |m: Matrix| {
            let mut m = m;
            for r in 0..m.rows() {
                let n = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                m.row_mut(r).iter_mut().for_each(|v| *v /= n);
            }
            m
        };
        let vs: Vec<Matrix> = (0..4).map(|_| unit(random(1, 8, &mut rng))).collect();
        assert_eq!(contrastive_value(&vs[0], &vs[1], &vs[2], &vs[3], 0.2), 0.0);

        let e = Matrix::identity(2);
        let hand = contrastive_value(&e, &e, &e, &e, 1.0);
        assert!((hand - 2.0 * (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((hand - 0.6266).abs() < 1e-4);

        let mut g = Graph::new();
        let v = g.constant(e);
        assert!(matches!(contrastive_loss(&mut g, v, v, v, v, 0.0), Err(Error::Config(_))));
        let bad = g.constant(Matrix::zeros(3, 2));
        assert!(matches!(contrastive_loss(&mut g, v, bad, v, v, 1.0), Err(Error::Dimension(_))));

        let qs: Vec<Matrix> = (0..4).map(|_| unit(random(5, 8, &mut rng))).collect();
        assert!(contrastive_value(&qs[0], &qs[1], &qs[2], &qs[3], 0.2) >= 0.0);
    }

    #[test]
    fn keys_receive_no_gradient() {
        let mut g = Graph::new();
        let q = g.input(Matrix::identity(3));
        let k = g.input(Matrix::from_fn(3, 3, |r, c| (r + 2 * c) as f64 * 0.1));
        let l = contrastive_loss(&mut g, q, q, k, k, 0.5).unwrap();
        let grads = g.backward(l);
        assert!(grads.get(q).is_some());
        assert!(grads.get(k).is_none());
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(1.0, 2.0, 3.0, &w).unwrap().total, 3.3);
        let off = LossWeights {
            lambda_l: 0.0,
            lambda_c: 0.0,
        };
        assert_eq!(total_loss(0.7, 2.0, 3.0, &off).unwrap().total, 0.7);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w).unwrap().total, 0.0);
        match total_loss(1.0, f64::NAN, 0.0, &w) {
            Err(Error::Numeric(m)) => assert!(m.starts_with("loc")),
            other => panic!("{other:?}"),
        }
        let neg = LossWeights {
            lambda_l: -1.0,
            lambda_c: 0.0,
        };
        assert!(total_loss(1.0, 1.0, 1.0, &neg).is_err());

        // affine in each term with slopes (1, lambda_l, lambda_c)
        let base = total_loss(0.4, 0.5, 0.6, &w).unwrap().total;
        assert!((total_loss(1.4, 0.5, 0.6, &w).unwrap().total - base - 1.0).abs() < 1e-12);
        assert!((total_loss(0.4, 1.5, 0.6, &w).unwrap().total - base - 1.0).abs() < 1e-12);
        assert!((total_loss(0.4, 0.5, 1.6, &w).unwrap().total - base - 0.1).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..5 {
            let target = random(4, 6, &mut rng);
            let other = random(4, 6, &mut rng);
            let x = random(4, 6, &mut rng);
            check_grad(
                &x,
                |g, v| {
                    let t = g.constant(target.clone());
                    let o = g.constant(other.clone());
                    recon_loss(g, v, o, t, t).unwrap()
                },
                &mut rng,
            );

            let logits = random(5, 7, &mut rng).map(|v| 3.0 * v);
            let targets: Vec<usize> = (0..5).map(|_| rng.random_range(0..7)).collect();
            let tau = 0.5 + case as f64 * 0.25;
            check_grad(&logits, |g, v| location_loss(g, v, &targets, tau).unwrap(), &mut rng);

            let (qw, ks, kw) = (random(4, 5, &mut rng), random(4, 5, &mut rng), random(4, 5, &mut rng));
            let qs = random(4, 5, &mut rng);
            check_grad(
                &qs,
                |g, v| {
                    let others = [&qw, &ks, &kw].map(|m| g.constant(m.clone()));
                    let others = others.map(|o| g.l2_normalize_rows(o));
                    let q = g.l2_normalize_rows(v);
                    contrastive_loss(g, q, others[0], others[1], others[2], 0.2).unwrap()
                },
                &mut rng,
            );
        }
    }
}
