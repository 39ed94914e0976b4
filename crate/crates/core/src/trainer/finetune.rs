use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::AdamW;
use super::schedule::{check_loop, lr_at};
use super::mix_seed;
use crate::autograd::Graph;
use crate::dataio::{apply_pipeline, patchify, ImageRecord, PipelineSpec};
use crate::error::{Error, Result};
use crate::losses::argmax_rows;
use crate::model::{DropPath, Sdmae, ENCODER};
use crate::params::ParamStore;
use crate::tensor::Matrix;

const SHUFFLE_STREAM: u64 = 0x4649_4e45;

/// Supervised schedule; drop path comes from the encoder config.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for FinetuneSchedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            warmup_epochs: 20,
            total_epochs: 100,
            batch_size: 64,
            weight_decay: 0.05,
            seed: 0,
        }
    }
}

impl FinetuneSchedule {
    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn validate(&self) -> Result<()> {
        check_loop(
            self.warmup_epochs,
            self.total_epochs,
            self.batch_size,
            self.base_lr,
            self.weight_decay,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub top1: f64,
    /// Mean training cross-entropy per epoch.
    pub loss_curve: Vec<f64>,
    pub location_accuracy: Option<f64>,
}

fn check_labels(records: &[ImageRecord], classes: usize, split: &str) -> Result<()> {
    if let Some(r) = records.iter().find(|r| r.label >= classes) {
        return Err(Error::config(format!(
            "{split} record {} has label {} but the classifier has {classes} classes",
            r.source_id, r.label
        )));
    }
    Ok(())
}

fn tokens_of(model: &Sdmae, images: &[&crate::dataio::Image]) -> Result<Matrix> {
    let p = model.config().encoder.patch_size;
    let seqs: Vec<Matrix> = images.iter().map(|img| patchify(img, p).map(|s| s.tokens)).collect::<Result<_>>()?;
    Matrix::vstack(&seqs.iter().collect::<Vec<_>>())
}

/// Predicted class per record, batched, without augmentation or drop path.
pub fn classify(model: &Sdmae, params: &ParamStore, records: &[ImageRecord], batch: usize) -> Result<Vec<usize>> {
    let n = model.config().n_tokens();
    let all: Vec<usize> = (0..n).collect();
    let pos_one = model.pos_embed().token_rows(&all)?;
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch.max(1)) {
        let imgs: Vec<&crate::dataio::Image> = chunk.iter().map(|r| &r.pixels).collect();
        let mut g = Graph::new();
        let t = g.constant(tokens_of(model, &imgs)?);
        let pos = Matrix::vstack(&vec![&pos_one; chunk.len()])?;
        let enc = model.encode_batch::<ChaCha8Rng>(&mut g, params, t, pos, chunk.len(), None)?;
        let logits = model.classify_batch(&mut g, params, enc, chunk.len())?;
        out.extend(argmax_rows(g.value(logits)));
    }
    Ok(out)
}

/// Copies the encoder from `init` into freshly initialized parameters.
fn initial_params(model: &Sdmae, init: Option<&ParamStore>, classes: usize, seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    model.init_encoder(&mut params, &mut rng);
    if let Some(init) = init {
        let prefix = format!("{ENCODER}.");
        let names: Vec<String> = params.with_prefix(&prefix).map(|(n, _)| n.to_string()).collect();
        for rest in names {
            let name = format!("{prefix}{rest}");
            let fresh = params.get(&name).unwrap();
            match init.get(&name) {
                Some(m) if m.same_shape(fresh) => {
                    let m = m.clone();
                    params.insert(name, m);
                }
                Some(m) => {
                    return Err(Error::Parameter(format!(
                        "`{name}` is {}x{} in the checkpoint, {}x{} in the config",
                        m.rows(),
                        m.cols(),
                        fresh.rows(),
                        fresh.cols()
                    )))
                }
                None => return Err(Error::Parameter(format!("checkpoint lacks `{name}`"))),
            }
        }
        if init.count(&prefix) != params.count(&prefix) {
            return Err(Error::Parameter("checkpoint encoder has extra tensors".into()));
        }
    }
    model.init_classifier(&mut params, classes);
    Ok(params)
}

/// Trains encoder + linear class-token classifier with weak augmentation and
/// drop path, then scores the test split. Returns the report and the final
/// parameters (encoder and `head.*`).
pub fn finetune(
    model: &Sdmae,
    init: Option<&ParamStore>,
    train: &[ImageRecord],
    test: &[ImageRecord],
    classes: usize,
    fs: &FinetuneSchedule,
) -> Result<(EvalReport, ParamStore)> {
    fs.validate()?;
    if classes < 2 {
        return Err(Error::config("fine-tuning needs at least 2 classes"));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Input("fine-tuning needs non-empty train and test splits".into()));
    }
    check_labels(train, classes, "train")?;
    check_labels(test, classes, "test")?;

    let cfg = model.config();
    let mut params = initial_params(model, init, classes, fs.seed)?;
    let mut optim = AdamW::new(fs.weight_decay);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(mix_seed(fs.seed, 1, 0));
    let per_epoch = train.len().div_ceil(fs.batch_size);
    let warmup = (fs.warmup_epochs * per_epoch) as u64;
    let total = (fs.total_epochs * per_epoch) as u64;
    let peak = fs.peak_lr();
    let weak = PipelineSpec::weak();
    let pos_one = model.pos_embed().token_rows(&(0..cfg.n_tokens()).collect::<Vec<_>>())?;
    let mut step = 0u64;
    let mut loss_curve = Vec::with_capacity(fs.total_epochs);

    for epoch in 0..fs.total_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle = ChaCha8Rng::seed_from_u64(fs.seed ^ SHUFFLE_STREAM);
        shuffle.set_stream(epoch as u64);
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(fs.batch_size) {
            let views: Vec<crate::dataio::Image> = chunk
                .iter()
                .map(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(fs.seed, epoch as u64 + 2, i as u64));
                    apply_pipeline(&train[i].pixels, &weak, cfg.image_size, &mut rng)
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&crate::dataio::Image> = views.iter().collect();
            let b = chunk.len();
            let mut g = Graph::new();
            let t = g.constant(tokens_of(model, &refs)?);
            let pos = Matrix::vstack(&vec![&pos_one; b])?;
            let drop = DropPath {
                rate: cfg.encoder.drop_path,
                rng: &mut drop_rng,
            };
            let enc = model.encode_batch(&mut g, &params, t, pos, b, Some(drop))?;
            let logits = model.classify_batch(&mut g, &params, enc, b)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].label).collect();
            let loss = g.cross_entropy(logits, labels)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric("fine-tuning cross-entropy".into()));
            }
            epoch_loss += value;
            let grads = g.param_grads(&g.backward(loss));
            let lr = lr_at(step, peak, warmup, total);
            optim.step(&mut params, &grads, lr);
            step += 1;
        }
        loss_curve.push(epoch_loss / per_epoch as f64);
    }

    let predicted = classify(model, &params, test, fs.batch_size)?;
    let hits = predicted.iter().zip(test).filter(|(p, r)| **p == r.label).count();
    let report = EvalReport {
        top1: hits as f64 / test.len() as f64,
        loss_curve,
        location_accuracy: None,
    };
    Ok((report, params))
}
