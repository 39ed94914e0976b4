use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::optim::AdamW;
use super::schedule::{lr_at, TrainSchedule};
use super::{metrics_csv, mix_seed, write_text, EpochMetrics};
use crate::autograd::{Graph, Var};
use crate::dataio::{augment_pair, normalize_targets, patchify, AugmentPolicy, AugmentedPair, Image, ImageRecord};
use crate::error::{Error, Result};
use crate::losses::{
    argmax_rows, contrastive_loss, location_loss, recon_loss, total_loss, LossBreakdown,
};
use crate::masking::{reassembly_index, sample_mask_plan, MaskPlan};
use crate::model::{ema_update, Branch, MomentumPair, Sdmae, FEATURE_K, MASK_TOKEN};
use crate::params::ParamStore;
use crate::tensor::Matrix;

const SHUFFLE_STREAM: u64 = 0x5348_5546;

/// Everything mutated by the training loop.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub optim: AdamW,
    /// Source of mask plans; persisted in checkpoints.
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub step: u64,
}

impl TrainState {
    /// Parameters drawn from `seed`; the same generator then continues as the
    /// mask source.
    pub fn new(model: &Sdmae, s: &TrainSchedule) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        let params = model.init_params(&mut rng);
        Self {
            params,
            optim: AdamW::new(s.weight_decay),
            rng,
            epoch: 0,
            step: 0,
        }
    }

    pub fn to_checkpoint(&self, config_hash: [u8; 32], history: Vec<EpochMetrics>) -> Checkpoint {
        Checkpoint {
            epoch: self.epoch,
            step: self.step,
            config_hash,
            params: self.params.clone(),
            optim: self.optim.clone(),
            rng: self.rng.clone(),
            history,
        }
    }

    pub fn from_checkpoint(c: Checkpoint) -> (Self, Vec<EpochMetrics>) {
        (
            Self {
                params: c.params,
                optim: c.optim,
                rng: c.rng,
                epoch: c.epoch,
                step: c.step,
            },
            c.history,
        )
    }
}

/// Mask plans for every sample of both views.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPlans {
    pub strong: Vec<MaskPlan>,
    pub weak: Vec<MaskPlan>,
}

/// Draws independent plans per view, or reuses the strong plans for the weak
/// view when `tie` is set.
pub fn sample_plans(n: usize, mask_ratio: f64, batch: usize, tie: bool, rng: &mut ChaCha8Rng) -> Result<ViewPlans> {
    let strong: Vec<MaskPlan> = (0..batch)
        .map(|_| sample_mask_plan(n, mask_ratio, rng))
        .collect::<Result<_>>()?;
    let weak = if tie {
        strong.clone()
    } else {
        (0..batch)
            .map(|_| sample_mask_plan(n, mask_ratio, rng))
            .collect::<Result<_>>()?
    };
    Ok(ViewPlans { strong, weak })
}

/// A recorded forward pass over one batch of pairs.
pub struct Forward {
    pub graph: Graph,
    pub total: Var,
    pub losses: LossBreakdown,
    /// Hard-argmax location accuracy over both views' visible tokens.
    pub loc_acc: f64,
}

struct ViewOut {
    pred: Var,
    target: Var,
    loc: Var,
    loc_hits: usize,
    loc_count: usize,
    dec: Var,
}

fn view_forward(
    g: &mut Graph,
    model: &Sdmae,
    params: &ParamStore,
    images: &[&Image],
    plans: &[MaskPlan],
    tau_loc: f64,
) -> Result<ViewOut> {
    let cfg = model.config();
    let b = images.len();
    let n = cfg.n_tokens();
    let n_vis = plans[0].n_visible();
    if plans.iter().any(|p| p.n_total != n || p.n_visible() != n_vis) {
        return Err(Error::dim("mask plans in one batch must share N and N_v"));
    }

    let mut visible = Vec::with_capacity(b);
    let mut pos = Vec::with_capacity(b);
    let mut targets = Vec::with_capacity(b);
    for (img, plan) in images.iter().zip(plans) {
        let seq = patchify(img, cfg.encoder.patch_size)?;
        if seq.len() != n || seq.dim() != cfg.token_dim() {
            return Err(Error::dim(format!(
                "view patchifies to {}x{}, model expects {n}x{}",
                seq.len(),
                seq.dim(),
                cfg.token_dim()
            )));
        }
        visible.push(seq.tokens.gather_rows(&plan.visible_idx)?);
        targets.push(normalize_targets(&seq.tokens.gather_rows(&plan.masked_idx)?));
        pos.push(model.pos_embed().token_rows(&plan.visible_idx)?);
    }
    let stack = |ms: &[Matrix]| Matrix::vstack(&ms.iter().collect::<Vec<_>>());
    let tokens = g.constant(stack(&visible)?);
    let enc = model.encode_batch::<ChaCha8Rng>(g, params, tokens, stack(&pos)?, b, None)?;

    let enc_seq = n_vis + 1;
    let vis_rows: Vec<usize> = (0..b)
        .flat_map(|i| (1..enc_seq).map(move |k| i * enc_seq + k))
        .collect();
    let z_vis = g.gather_rows(enc, vis_rows)?;
    let logits = model.location_logits(g, params, z_vis)?;
    if cfg.loc_classes() < n {
        return Err(Error::config(format!(
            "location vocabulary {} cannot index {n} positions",
            cfg.loc_classes()
        )));
    }
    let loc_targets: Vec<usize> = plans.iter().flat_map(|p| p.visible_idx.iter().copied()).collect();
    let loc = location_loss(g, logits, &loc_targets, tau_loc)?;
    let loc_hits = argmax_rows(g.value(logits))
        .iter()
        .zip(&loc_targets)
        .filter(|(a, t)| a == t)
        .count();

    let mask = g.param(params, MASK_TOKEN)?;
    let merged = g.concat_rows(vec![enc, mask])?;
    let sentinel = b * enc_seq;
    let mut idx = Vec::with_capacity(b * (n + 1));
    for (i, plan) in plans.iter().enumerate() {
        idx.push(i * enc_seq);
        idx.extend(reassembly_index(plan, i * enc_seq + 1, sentinel));
    }
    let z_all = g.gather_rows(merged, idx)?;
    let dec = model.decode_batch(g, params, z_all, b)?;
    let pred_rows: Vec<usize> = plans
        .iter()
        .enumerate()
        .flat_map(|(i, p)| p.masked_idx.iter().map(move |&j| i * (n + 1) + 1 + j))
        .collect();
    let pred = model.pixel_head(g, params, dec, pred_rows)?;
    let target = g.constant(stack(&targets)?);
    Ok(ViewOut {
        pred,
        target,
        loc,
        loc_hits,
        loc_count: loc_targets.len(),
        dec,
    })
}

fn class_rows(g: &mut Graph, x: Var, batch: usize, seq: usize) -> Result<Var> {
    g.gather_rows(x, (0..batch).map(|b| b * seq).collect())
}

/// Builds the full objective for one batch without touching parameters.
pub fn forward(
    model: &Sdmae,
    params: &ParamStore,
    s: &TrainSchedule,
    batch: &[AugmentedPair],
    plans: &ViewPlans,
) -> Result<Forward> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    if plans.strong.len() != batch.len() || plans.weak.len() != batch.len() {
        return Err(Error::dim("one mask plan per sample and view is required"));
    }
    let mut g = Graph::new();
    g.freeze_prefix(FEATURE_K);
    let strong: Vec<&Image> = batch.iter().map(|p| &p.strong).collect();
    let weak: Vec<&Image> = batch.iter().map(|p| &p.weak).collect();
    let vs = view_forward(&mut g, model, params, &strong, &plans.strong, s.tau_loc)?;
    let vw = view_forward(&mut g, model, params, &weak, &plans.weak, s.tau_loc)?;

    let recon = recon_loss(&mut g, vs.pred, vw.pred, vs.target, vw.target)?;
    let loc_sum = g.add(vs.loc, vw.loc)?;
    let loc = g.scale(loc_sum, 0.5);
    let loc_acc = (vs.loc_hits + vw.loc_hits) as f64 / (vs.loc_count + vw.loc_count) as f64;

    let w = s.weights;
    let mut total = recon;
    if w.lambda_l > 0.0 {
        let t = g.scale(loc, w.lambda_l);
        total = g.add(total, t)?;
    }
    let mut ctr_value = 0.0;
    if w.lambda_c > 0.0 {
        let b = batch.len();
        let seq = model.config().n_tokens() + 1;
        let query = |g: &mut Graph, dec: Var, branch: Branch| -> Result<Var> {
            let f = model.feature_batch(g, params, dec, branch)?;
            let c = class_rows(g, f, b, seq)?;
            let p = model.project_batch(g, params, c)?;
            Ok(g.l2_normalize_rows(p))
        };
        let strong_branch = if model.config().literal_strong_query {
            Branch::Key
        } else {
            Branch::Query
        };
        let q_s = query(&mut g, vs.dec, strong_branch)?;
        let q_w = query(&mut g, vw.dec, Branch::Query)?;
        let key = |g: &mut Graph, dec: Var| -> Result<Var> {
            let d = g.detach(dec);
            let f = model.feature_batch(g, params, d, Branch::Key)?;
            let c = class_rows(g, f, b, seq)?;
            Ok(g.l2_normalize_rows(c))
        };
        let k_s = key(&mut g, vs.dec)?;
        let k_w = key(&mut g, vw.dec)?;
        let ctr = contrastive_loss(&mut g, q_s, q_w, k_s, k_w, s.tau)?;
        ctr_value = g.value(ctr).item();
        let t = g.scale(ctr, w.lambda_c);
        total = g.add(total, t)?;
    }
    let losses = total_loss(g.value(recon).item(), g.value(loc).item(), ctr_value, &w)?;
    Ok(Forward {
        graph: g,
        total,
        losses,
        loc_acc,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutput {
    pub losses: LossBreakdown,
    pub loc_acc: f64,
    pub lr: f64,
}

/// Samples mask plans from the state's generator, takes one optimizer step at
/// `lr` and then one momentum update.
pub fn pretrain_step(
    model: &Sdmae,
    state: &mut TrainState,
    s: &TrainSchedule,
    batch: &[AugmentedPair],
    lr: f64,
    tie_masks: bool,
) -> Result<StepOutput> {
    let n = model.config().n_tokens();
    let plans = sample_plans(n, s.mask_ratio, batch.len(), tie_masks, &mut state.rng)?;
    let fwd = forward(model, &state.params, s, batch, &plans)?;
    let grads = fwd.graph.backward(fwd.total);
    let grads = fwd.graph.param_grads(&grads);
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::Numeric(format!("gradient of {name}")));
    }
    state.optim.step(&mut state.params, &grads, lr);
    ema_update(&mut state.params, &MomentumPair::new(s.momentum_a))?;
    state.step += 1;
    Ok(StepOutput {
        losses: fwd.losses,
        loc_acc: fwd.loc_acc,
        lr,
    })
}

/// Mean losses and location accuracy on `records` with identity views.
pub fn evaluate_pretrain(
    model: &Sdmae,
    params: &ParamStore,
    s: &TrainSchedule,
    records: &[ImageRecord],
    seed: u64,
) -> Result<(LossBreakdown, f64)> {
    if records.is_empty() {
        return Err(Error::Input("no records to evaluate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = AugmentPolicy {
        out_size: Some(model.config().image_size),
        ..AugmentPolicy::identity()
    };
    let mut acc = (LossBreakdown::default(), 0.0);
    let mut batches = 0;
    for chunk in records.chunks(s.batch_size) {
        let pairs: Vec<AugmentedPair> = chunk
            .iter()
            .map(|r| augment_pair(r, &policy, 0))
            .collect::<Result<_>>()?;
        let plans = sample_plans(model.config().n_tokens(), s.mask_ratio, pairs.len(), false, &mut rng)?;
        let f = forward(model, params, s, &pairs, &plans)?;
        acc.0.recon += f.losses.recon;
        acc.0.loc += f.losses.loc;
        acc.0.ctr += f.losses.ctr;
        acc.0.total += f.losses.total;
        acc.1 += f.loc_acc;
        batches += 1;
    }
    let k = batches as f64;
    let l = acc.0;
    Ok((
        LossBreakdown {
            recon: l.recon / k,
            loc: l.loc / k,
            ctr: l.ctr / k,
            total: l.total / k,
        },
        acc.1 / k,
    ))
}

/// Knobs of [`pretrain`] beyond the schedule.
pub struct PretrainOptions<'a> {
    pub policy: AugmentPolicy,
    pub config_hash: [u8; 32],
    /// Where `metrics.csv` and `checkpoints/` go; nothing is written if unset.
    pub out_dir: Option<PathBuf>,
    /// Keep `epoch-NNNN.ckpt` every this many epochs (0 disables).
    pub checkpoint_every: usize,
    /// Stop once this many epochs are complete, as if interrupted.
    pub stop_after: Option<usize>,
    pub resume: Option<Checkpoint>,
    pub tie_masks: bool,
    pub on_epoch: Option<Box<dyn FnMut(&EpochMetrics) + 'a>>,
}

impl Default for PretrainOptions<'_> {
    fn default() -> Self {
        Self {
            policy: AugmentPolicy::default(),
            config_hash: [0; 32],
            out_dir: None,
            checkpoint_every: 0,
            stop_after: None,
            resume: None,
            tie_masks: false,
            on_epoch: None,
        }
    }
}

pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    /// Step results of this invocation only.
    pub steps: Vec<StepOutput>,
}

fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

/// Runs `s.total_epochs` epochs of [`pretrain_step`] over seeded shuffles.
pub fn pretrain(model: &Sdmae, s: &TrainSchedule, records: &[ImageRecord], mut opts: PretrainOptions<'_>) -> Result<PretrainOutcome> {
    s.validate()?;
    if records.is_empty() {
        return Err(Error::Input("pre-training needs at least one record".into()));
    }
    let (mut state, mut history) = match opts.resume.take() {
        Some(c) => {
            if c.config_hash != opts.config_hash {
                return Err(Error::ResumeMismatch(
                    "checkpoint was written under a different configuration".into(),
                ));
            }
            TrainState::from_checkpoint(c)
        }
        None => (TrainState::new(model, s), Vec::new()),
    };
    let policy = AugmentPolicy {
        out_size: Some(model.config().image_size),
        ..opts.policy
    };
    let per_epoch = records.len().div_ceil(s.batch_size);
    let warmup = (s.warmup_epochs * per_epoch) as u64;
    let total = (s.total_epochs * per_epoch) as u64;
    let peak = s.peak_lr();
    let last_epoch = opts.stop_after.map_or(s.total_epochs, |k| k.min(s.total_epochs));
    let mut steps = Vec::new();

    let persist = |state: &TrainState, history: &[EpochMetrics]| -> Result<()> {
        if let Some(out) = &opts.out_dir {
            write_text(&out.join("metrics.csv"), &metrics_csv(history))?;
            let c = state.to_checkpoint(opts.config_hash, history.to_vec());
            let dir = checkpoint_dir(out);
            if opts.checkpoint_every > 0 && state.epoch > 0 && state.epoch % opts.checkpoint_every == 0 {
                save_checkpoint(&c, &dir.join(format!("epoch-{:04}.ckpt", state.epoch)))?;
            }
            save_checkpoint(&c, &dir.join("last.ckpt"))?;
        }
        Ok(())
    };
    if state.epoch == 0 {
        persist(&state, &history)?;
    }

    while state.epoch < last_epoch {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..records.len()).collect();
        let mut shuffle = ChaCha8Rng::seed_from_u64(s.seed ^ SHUFFLE_STREAM);
        shuffle.set_stream(epoch as u64);
        order.shuffle(&mut shuffle);

        let mut sums = [0.0; 5];
        let mut lr = 0.0;
        for chunk in order.chunks(s.batch_size) {
            let pairs: Vec<AugmentedPair> = chunk
                .iter()
                .map(|&i| augment_pair(&records[i], &policy, mix_seed(s.seed, epoch as u64, i as u64)))
                .collect::<Result<_>>()?;
            lr = lr_at(state.step, peak, warmup, total);
            let out = pretrain_step(model, &mut state, s, &pairs, lr, opts.tie_masks)?;
            let l = out.losses;
            for (acc, v) in sums.iter_mut().zip([l.recon, l.loc, l.ctr, l.total, out.loc_acc]) {
                *acc += v;
            }
            steps.push(out);
        }
        let k = per_epoch as f64;
        let m = EpochMetrics {
            epoch: epoch + 1,
            recon: sums[0] / k,
            loc: sums[1] / k,
            ctr: sums[2] / k,
            total: sums[3] / k,
            lr,
            loc_acc: sums[4] / k,
        };
        history.push(m);
        state.epoch += 1;
        persist(&state, &history)?;
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&m);
        }
    }
    Ok(PretrainOutcome {
        checkpoint: state.to_checkpoint(opts.config_hash, history),
        steps,
    })
}

#[cfg(test)]
mod tests;
