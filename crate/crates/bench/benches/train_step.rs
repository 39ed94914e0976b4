use criterion::{criterion_group, criterion_main, Criterion};
use sdmae::trainer::{pretrain_step, TrainSchedule, TrainState};
use std::hint::black_box;

fn step(c: &mut Criterion) {
    let model = sdmae_bench::toy_model();
    let pairs = sdmae_bench::toy_pairs(32);
    let mut group = c.benchmark_group("pretrain_step");
    group.sample_size(10);
    for (name, lambda_l, lambda_c) in [("full", 1.0, 0.1), ("recon_only", 0.0, 0.0)] {
        let mut s = TrainSchedule::default();
        s.weights.lambda_l = lambda_l;
        s.weights.lambda_c = lambda_c;
        let mut state = TrainState::new(&model, &s);
        group.bench_function(format!("toy_b32_{name}"), |b| {
            b.iter(|| black_box(pretrain_step(&model, &mut state, &s, &pairs, 1e-4, false).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, step);
criterion_main!(benches);
