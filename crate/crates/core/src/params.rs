//! Named parameter storage.

use std::collections::BTreeMap;

use rand::Rng;

use crate::tensor::Matrix;

/// All learnable tensors, addressed by dotted hierarchical names such as
/// `encoder.blocks.0.attn.qkv.weight`. Iteration order is lexicographic, which
/// keeps checkpoints and optimizer sweeps deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Matrix> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Entries under `prefix`, with the prefix stripped.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Matrix)> {
        self.tensors
            .iter()
            .filter_map(move |(k, v)| k.strip_prefix(prefix).map(|rest| (rest, v)))
    }

    /// Total scalar count of parameters under `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.with_prefix(prefix).map(|(_, m)| m.len()).sum()
    }

    /// Removes every entry under `prefix`.
    pub fn retain_prefix_not(&mut self, prefix: &str) {
        self.tensors.retain(|k, _| !k.starts_with(prefix));
    }
}

/// Normal(0, std) truncated to ±2·std by rejection.
pub fn trunc_normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| loop {
        // Box-Muller; one draw per accepted value keeps the stream simple
        let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = rng.random();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            break z * std;
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trunc_normal_respects_bounds_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = trunc_normal(100, 100, 0.02, &mut rng);
        assert!(m.as_slice().iter().all(|v| v.abs() <= 0.04));
        let var = m.as_slice().iter().map(|v| v * v).sum::<f64>() / m.len() as f64;
        // truncation at 2σ shrinks the variance to ≈0.774σ²
        assert!((var.sqrt() - 0.02 * 0.774f64.sqrt()).abs() < 1e-3);
    }

    #[test]
    fn prefix_views() {
        let mut p = ParamStore::new();
        p.insert("a.x", Matrix::zeros(2, 2));
        p.insert("a.y", Matrix::zeros(1, 3));
        p.insert("b.x", Matrix::zeros(1, 1));
        assert_eq!(p.count("a."), 7);
        let names: Vec<_> = p.with_prefix("a.").map(|(n, _)| n.to_string()).collect();
        assert_eq!(names, ["x", "y"]);
        p.retain_prefix_not("a.");
        assert_eq!(p.len(), 1);
    }
}
