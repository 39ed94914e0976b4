use super::*;
use crate::dataio::{gen_synthetic, SyntheticSpec};
use crate::losses::LossWeights;
use crate::masking::reassemble;
use crate::model::{ModelConfig, FEATURE_Q};
use crate::trainer::{decode_checkpoint, encode_checkpoint};

fn tiny_model() -> Sdmae {
    let mut cfg = ModelConfig::toy();
    cfg.image_size = 16;
    cfg.encoder.depth = 1;
    cfg.encoder.dim = 32;
    Sdmae::new(cfg).unwrap()
}

fn schedule() -> TrainSchedule {
    TrainSchedule {
        base_lr: 0.05,
        warmup_epochs: 1,
        total_epochs: 3,
        batch_size: 4,
        seed: 17,
        ..TrainSchedule::default()
    }
}

fn records(n_per_class: usize) -> Vec<ImageRecord> {
    gen_synthetic(
        &SyntheticSpec {
            classes: 4,
            per_class: n_per_class,
            resolution: 16,
            seed: 5,
        },
        4,
    )
    .unwrap()
}

fn pairs(recs: &[ImageRecord], tied: bool) -> Vec<AugmentedPair> {
    let policy = AugmentPolicy::default();
    recs.iter()
        .enumerate()
        .map(|(i, r)| {
            let mut p = augment_pair(r, &policy, i as u64).unwrap();
            if tied {
                p.weak = p.strong.clone();
            }
            p
        })
        .collect()
}

/// Plain per-sample masked autoencoder loss built from the single-sample
/// model API, summed over the two (tied) views.
fn standalone_mae(model: &Sdmae, params: &ParamStore, batch: &[AugmentedPair], plans: &[MaskPlan]) -> f64 {
    let p = model.config().encoder.patch_size;
    let mut sq = 0.0;
    let mut count = 0usize;
    for (pair, plan) in batch.iter().zip(plans) {
        let seq = patchify(&pair.strong, p).unwrap();
        let visible = seq.tokens.gather_rows(&plan.visible_idx).unwrap();
        let pos = model.pos_embed().token_rows(&plan.visible_idx).unwrap();
        let enc = model.encode_visible(params, &visible, &pos).unwrap();
        let body = enc.gather_rows(&(1..enc.rows()).collect::<Vec<_>>()).unwrap();
        let tokens = reassemble(&body, params.get(MASK_TOKEN).unwrap(), plan).unwrap();
        let z_all = Matrix::vstack(&[&enc.gather_rows(&[0]).unwrap(), &tokens]).unwrap();
        let (_, pixels) = model.decode_all(params, &z_all).unwrap();
        let pred = pixels.gather_rows(&plan.masked_idx).unwrap();
        let target = normalize_targets(&seq.tokens.gather_rows(&plan.masked_idx).unwrap());
        for (a, b) in pred.as_slice().iter().zip(target.as_slice()) {
            sq += (a - b) * (a - b);
        }
        count += pred.len();
    }
    2.0 * sq / count as f64
}

#[test]
fn reduces_to_plain_mae() {
    let model = tiny_model();
    let s = TrainSchedule {
        weights: LossWeights {
            lambda_l: 0.0,
            lambda_c: 0.0,
        },
        ..schedule()
    };
    let state = TrainState::new(&model, &s);
    let batch = pairs(&records(1), true);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let plans = sample_plans(16, 0.75, batch.len(), true, &mut rng).unwrap();
    let f = forward(&model, &state.params, &s, &batch, &plans).unwrap();
    let oracle = standalone_mae(&model, &state.params, &batch, &plans.strong);
    assert_eq!(f.losses.total, f.losses.recon);
    assert!((f.losses.total - oracle).abs() < 1e-9, "{} vs {oracle}", f.losses.total);
    assert_eq!(f.losses.total, f.graph.value(f.total).item());
}

#[test]
fn full_objective_composes_terms() {
    let model = tiny_model();
    let s = schedule();
    let state = TrainState::new(&model, &s);
    let batch = pairs(&records(1), false);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let plans = sample_plans(16, 0.75, batch.len(), false, &mut rng).unwrap();
    assert_ne!(plans.strong, plans.weak);
    let f = forward(&model, &state.params, &s, &batch, &plans).unwrap();
    let l = f.losses;
    assert!(l.ctr > 0.0 && l.loc > 0.0 && l.recon > 0.0);
    assert!((l.total - (l.recon + l.loc + 0.1 * l.ctr)).abs() < 1e-12);
    assert!((f.graph.value(f.total).item() - l.total).abs() < 1e-12);
    assert!((0.0..=1.0).contains(&f.loc_acc));
}

#[test]
fn momentum_branch_gets_no_gradient() {
    let model = tiny_model();
    let s = schedule();
    let state = TrainState::new(&model, &s);
    let batch = pairs(&records(1), false);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let plans = sample_plans(16, 0.75, batch.len(), false, &mut rng).unwrap();
    let f = forward(&model, &state.params, &s, &batch, &plans).unwrap();
    let grads = f.graph.param_grads(&f.graph.backward(f.total));
    assert!(grads.keys().any(|k| k.starts_with(FEATURE_Q)));
    assert!(!grads.keys().any(|k| k.starts_with(FEATURE_K)));

    // perturbing θ_k moves the loss, so the branch is live, yet a step at
    // momentum 1 leaves it exactly where it was
    let mut bumped = state.params.clone();
    for (name, m) in bumped.iter_mut() {
        if name.starts_with(FEATURE_K) {
            m.as_mut_slice().iter_mut().for_each(|v| *v += 0.05);
        }
    }
    let g2 = forward(&model, &bumped, &s, &batch, &plans).unwrap();
    assert_ne!(g2.losses.ctr, f.losses.ctr);
    assert_eq!(g2.losses.recon, f.losses.recon);

    let mut st = state.clone();
    let frozen = TrainSchedule { momentum_a: 1.0, ..s };
    pretrain_step(&model, &mut st, &frozen, &batch, 0.01, false).unwrap();
    for (name, m) in state.params.with_prefix(FEATURE_K) {
        assert_eq!(st.params.get(&format!("{FEATURE_K}{name}")).unwrap(), m);
    }
}

#[test]
fn ema_follows_query_trajectory() {
    let model = tiny_model();
    let s = TrainSchedule {
        momentum_a: 0.9,
        ..schedule()
    };
    let mut state = TrainState::new(&model, &s);
    let batch = pairs(&records(1), false);
    let probe = "blocks.0.mlp.fc1.weight";
    let qname = format!("{FEATURE_Q}.{probe}");
    let kname = format!("{FEATURE_K}.{probe}");
    let mut expected = state.params.get(&kname).unwrap().as_slice()[..4].to_vec();
    for _ in 0..5 {
        pretrain_step(&model, &mut state, &s, &batch, 0.01, false).unwrap();
        let q = &state.params.get(&qname).unwrap().as_slice()[..4];
        for (e, &qv) in expected.iter_mut().zip(q) {
            *e = 0.9 * *e + 0.1 * qv;
        }
        let k = &state.params.get(&kname).unwrap().as_slice()[..4];
        for (e, kv) in expected.iter().zip(k) {
            assert!((e - kv).abs() < 1e-15);
        }
    }
    assert_eq!(state.step, 5);
    assert_eq!(state.optim.t, 5);
}

#[test]
fn non_finite_loss_names_the_term() {
    let model = tiny_model();
    let s = schedule();
    let mut state = TrainState::new(&model, &s);
    state.params.get_mut("decoder.pred.bias").unwrap().as_mut_slice()[0] = f64::NAN;
    let batch = pairs(&records(1), false);
    match pretrain_step(&model, &mut state, &s, &batch, 0.01, false) {
        Err(Error::Numeric(msg)) => assert!(msg.starts_with("recon"), "{msg}"),
        other => panic!("{other:?}"),
    }
    let mut state = TrainState::new(&model, &s);
    state.params.get_mut("loc_head.fc2.bias").unwrap().as_mut_slice()[0] = f64::INFINITY;
    match pretrain_step(&model, &mut state, &s, &batch, 0.01, false) {
        Err(Error::Numeric(msg)) => assert!(msg.starts_with("loc"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn seeded_steps_are_reproducible() {
    let model = tiny_model();
    let s = schedule();
    let batch = pairs(&records(1), false);
    let run = || {
        let mut st = TrainState::new(&model, &s);
        (0..50)
            .map(|_| pretrain_step(&model, &mut st, &s, &batch, 0.005, false).unwrap().losses)
            .collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.total.to_bits() == y.total.to_bits()));
}

#[test]
fn empty_loop_and_metrics_rows() {
    let model = tiny_model();
    let recs = records(2);
    let zero = TrainSchedule {
        warmup_epochs: 0,
        total_epochs: 0,
        ..schedule()
    };
    let out = pretrain(&model, &zero, &recs, PretrainOptions::default()).unwrap();
    assert!(out.checkpoint.history.is_empty() && out.steps.is_empty());
    assert_eq!(out.checkpoint.params, TrainState::new(&model, &zero).params);

    let dir = tempfile::tempdir().unwrap();
    let s = schedule();
    let out = pretrain(
        &model,
        &s,
        &recs,
        PretrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            checkpoint_every: 2,
            ..PretrainOptions::default()
        },
    )
    .unwrap();
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + s.total_epochs);
    assert_eq!(out.checkpoint.history.len(), 3);
    assert_eq!(out.steps.len(), 3 * 2);
    assert!(dir.path().join("checkpoints/epoch-0002.ckpt").exists());
    let last = load_checkpoint_for_test(&dir.path().join("checkpoints/last.ckpt"));
    assert_eq!(last, out.checkpoint);
}

fn load_checkpoint_for_test(p: &Path) -> Checkpoint {
    crate::trainer::load_checkpoint(p).unwrap()
}

#[test]
fn interrupted_run_resumes_bit_for_bit() {
    let model = tiny_model();
    let recs = records(2);
    let s = TrainSchedule {
        total_epochs: 5,
        ..schedule()
    };
    let hash = [7; 32];
    let full = pretrain(
        &model,
        &s,
        &recs,
        PretrainOptions {
            config_hash: hash,
            ..PretrainOptions::default()
        },
    )
    .unwrap();
    let part = pretrain(
        &model,
        &s,
        &recs,
        PretrainOptions {
            config_hash: hash,
            stop_after: Some(3),
            ..PretrainOptions::default()
        },
    )
    .unwrap();
    assert_eq!(part.checkpoint.epoch, 3);
    // through the serialized form, as a real restart would
    let restored = decode_checkpoint(&encode_checkpoint(&part.checkpoint)).unwrap();
    let rest = pretrain(
        &model,
        &s,
        &recs,
        PretrainOptions {
            config_hash: hash,
            resume: Some(restored.clone()),
            ..PretrainOptions::default()
        },
    )
    .unwrap();
    assert_eq!(rest.checkpoint, full.checkpoint);
    assert_eq!(metrics_csv(&rest.checkpoint.history), metrics_csv(&full.checkpoint.history));

    let mismatch = pretrain(
        &model,
        &s,
        &recs,
        PretrainOptions {
            config_hash: [8; 32],
            resume: Some(restored),
            ..PretrainOptions::default()
        },
    );
    assert!(matches!(mismatch, Err(Error::ResumeMismatch(_))));
}

#[test]
fn ablation_toggles_all_run() {
    let model = tiny_model();
    let recs = records(1);
    for (l, c) in [(0.0, 0.0), (1.0, 0.0), (0.0, 0.1), (1.0, 0.1)] {
        let s = TrainSchedule {
            total_epochs: 2,
            weights: LossWeights {
                lambda_l: l,
                lambda_c: c,
            },
            ..schedule()
        };
        let out = pretrain(&model, &s, &recs, PretrainOptions::default()).unwrap();
        let h = &out.checkpoint.history;
        assert_eq!(h.len(), 2);
        assert_eq!(h[1].ctr == 0.0, c == 0.0);
        let base = h[1].recon + l * h[1].loc + c * h[1].ctr;
        assert!((h[1].total - base).abs() < 1e-9);
    }
}

#[test]
fn evaluation_reports_location_accuracy() {
    let model = tiny_model();
    let s = schedule();
    let state = TrainState::new(&model, &s);
    let (l, acc) = evaluate_pretrain(&model, &state.params, &s, &records(1), 2).unwrap();
    assert!(l.recon > 0.0 && (0.0..=1.0).contains(&acc));
}
