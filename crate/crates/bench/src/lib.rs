//! Shared fixtures for the benchmarks.

use sdmae::dataio::{augment_pair, gen_synthetic, AugmentPolicy, AugmentedPair, SyntheticSpec};
use sdmae::model::{ModelConfig, Sdmae};

/// The 32×32, P=4 toy model.
pub fn toy_model() -> Sdmae {
    Sdmae::new(ModelConfig::toy()).expect("toy config is valid")
}

/// `n` augmented synthetic pairs at the toy resolution.
pub fn toy_pairs(n: usize) -> Vec<AugmentedPair> {
    let spec = SyntheticSpec {
        classes: 4,
        per_class: n.div_ceil(4),
        resolution: 32,
        seed: 0,
    };
    let records = gen_synthetic(&spec, 4).expect("valid spec");
    let policy = AugmentPolicy {
        out_size: Some(32),
        ..AugmentPolicy::default()
    };
    records
        .iter()
        .take(n)
        .enumerate()
        .map(|(i, r)| augment_pair(r, &policy, i as u64).expect("valid policy"))
        .collect()
}
