use super::{FEATURE_K, FEATURE_Q};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// The gradient-trained query encoder and its momentum copy, identified by
/// name prefix inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumPair {
    pub query_prefix: String,
    pub key_prefix: String,
    /// Weight kept on the momentum side per update, in `[0, 1]`.
    pub momentum: f64,
}

impl MomentumPair {
    pub fn new(momentum: f64) -> Self {
        Self {
            query_prefix: FEATURE_Q.to_string(),
            key_prefix: FEATURE_K.to_string(),
            momentum,
        }
    }
}

/// `θ_k ← a·θ_k + (1−a)·θ_q` elementwise over every tensor of the pair.
pub fn ema_update(store: &mut ParamStore, pair: &MomentumPair) -> Result<()> {
    let a = pair.momentum;
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::config(format!("momentum {a} must lie in [0, 1]")));
    }
    let query: Vec<(String, crate::tensor::Matrix)> = store
        .with_prefix(&pair.query_prefix)
        .map(|(rest, m)| (rest.to_string(), m.clone()))
        .collect();
    let key_count = store.with_prefix(&pair.key_prefix).count();
    if query.is_empty() || key_count != query.len() {
        return Err(Error::Parameter(format!(
            "momentum pair is not congruent: {} query tensors, {key_count} key tensors",
            query.len()
        )));
    }
    for (rest, _) in &query {
        let name = format!("{}{rest}", pair.key_prefix);
        let q = store.get(&format!("{}{rest}", pair.query_prefix)).unwrap();
        match store.get(&name) {
            Some(k) if k.same_shape(q) => {}
            _ => {
                return Err(Error::Parameter(format!(
                    "momentum tensor `{name}` missing or shaped differently from its query"
                )))
            }
        }
    }
    for (rest, q) in query {
        let k = store.get_mut(&format!("{}{rest}", pair.key_prefix)).unwrap();
        for (kv, qv) in k.as_mut_slice().iter_mut().zip(q.as_slice()) {
            *kv = a * *kv + (1.0 - a) * qv;
        }
    }
    Ok(())
}
