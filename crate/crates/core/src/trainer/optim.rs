use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tensor::Matrix;

/// Adaptive moments with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Completed updates; drives bias correction.
    pub t: u64,
    pub m: BTreeMap<String, Matrix>,
    pub v: BTreeMap<String, Matrix>,
}

/// Biases, norms and free tokens are exempt from weight decay.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight") && !name.split('.').any(|part| part.starts_with("norm"))
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter that has a gradient. Parameters without
    /// one are left untouched, moments included.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Matrix>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let decay = if decays(name) { lr * self.weight_decay } else { 0.0 };
            let (b1, b2) = (self.beta1, self.beta2);
            for (((p, &g), m), v) in p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                *p -= decay * *p + lr * update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_mask() {
        assert!(decays("encoder.blocks.0.attn.qkv.weight"));
        assert!(!decays("encoder.blocks.0.attn.qkv.bias"));
        assert!(!decays("encoder.blocks.0.norm1.weight"));
        assert!(!decays("encoder.norm.weight"));
        assert!(!decays("mask_token"));
        assert!(!decays("encoder.cls_token"));
    }

    #[test]
    fn zero_lr_leaves_params_even_with_decay() {
        let mut p = ParamStore::new();
        p.insert("a.weight", Matrix::filled(2, 2, 3.0));
        let before = p.clone();
        let mut opt = AdamW::new(0.5);
        let grads = BTreeMap::from([("a.weight".to_string(), Matrix::filled(2, 2, 1.0))]);
        opt.step(&mut p, &grads, 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_matches_hand_update() {
        let mut p = ParamStore::new();
        p.insert("w.weight", Matrix::scalar(1.0));
        p.insert("w.bias", Matrix::scalar(1.0));
        p.insert("untouched", Matrix::scalar(1.0));
        let mut opt = AdamW::new(0.1);
        let grads = BTreeMap::from([
            ("w.weight".to_string(), Matrix::scalar(0.5)),
            ("w.bias".to_string(), Matrix::scalar(-2.0)),
        ]);
        opt.step(&mut p, &grads, 0.01);
        // bias-corrected first step moves by lr·sign(g)·|g|/(|g|+eps)
        let step = 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((p.get("w.weight").unwrap().item() - (1.0 - 0.01 * 0.1 - step)).abs() < 1e-15);
        let step_b = 0.01 * 2.0 / (2.0 + 1e-8);
        assert!((p.get("w.bias").unwrap().item() - (1.0 + step_b)).abs() < 1e-15);
        assert_eq!(p.get("untouched").unwrap().item(), 1.0);
        assert!(!opt.m.contains_key("untouched"));
    }

    #[test]
    fn second_step_oracle() {
        let mut p = ParamStore::new();
        p.insert("x", Matrix::scalar(0.0));
        let mut opt = AdamW::new(0.0);
        let (g1, g2, lr) = (1.0, -3.0, 0.1);
        opt.step(&mut p, &BTreeMap::from([("x".to_string(), Matrix::scalar(g1))]), lr);
        opt.step(&mut p, &BTreeMap::from([("x".to_string(), Matrix::scalar(g2))]), lr);
        let m = 0.9 * 0.1 * g1 + 0.1 * g2;
        let v = 0.95 * 0.05 * g1 * g1 + 0.05 * g2 * g2;
        let mhat = m / (1.0 - 0.81);
        let vhat = v / (1.0 - 0.9025);
        let expect = -lr * g1 / (g1 + 1e-8) - lr * mhat / (vhat.sqrt() + 1e-8);
        assert!((p.get("x").unwrap().item() - expect).abs() < 1e-14);
    }
}
