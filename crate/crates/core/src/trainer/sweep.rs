use super::finetune::{finetune, FinetuneSchedule};
use super::pretrain::{pretrain, PretrainOptions};
use super::schedule::TrainSchedule;
use crate::dataio::{AugmentPolicy, ImageRecord};
use crate::error::{Error, Result};
use crate::model::{DecoderConfig, ModelConfig, Sdmae};

/// A full pretrain-then-finetune run held in memory.
#[derive(Clone, Debug)]
pub struct Experiment<'a> {
    pub model: ModelConfig,
    pub pretrain: TrainSchedule,
    pub finetune: FinetuneSchedule,
    pub policy: AugmentPolicy,
    pub train: &'a [ImageRecord],
    pub test: &'a [ImageRecord],
    pub classes: usize,
}

/// Pre-trains, fine-tunes from the result and returns test top-1.
pub fn run_experiment(e: &Experiment<'_>) -> Result<f64> {
    let model = Sdmae::new(e.model)?;
    let outcome = pretrain(
        &model,
        &e.pretrain,
        e.train,
        PretrainOptions {
            policy: e.policy,
            ..PretrainOptions::default()
        },
    )?;
    let (report, _) = finetune(&model, Some(&outcome.checkpoint.params), e.train, e.test, e.classes, &e.finetune)?;
    Ok(report.top1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub depth: usize,
    pub dim: usize,
    /// Test top-1, or the error that stopped this cell.
    pub top1: Result<f64, String>,
}

/// Full factorial over decoder depth and width. The decoder keeps the base
/// head count when it divides the width, otherwise falls back to one head.
/// A failing cell is recorded and the sweep moves on.
pub fn decoder_sweep(base: &Experiment<'_>, depths: &[usize], dims: &[usize]) -> Result<Vec<SweepRow>> {
    decoder_sweep_with(depths, dims, |depth, dim| {
        let heads = base.model.decoder.heads;
        let mut model = base.model;
        model.decoder = DecoderConfig {
            depth,
            dim,
            heads: if heads > 0 && dim % heads == 0 { heads } else { 1 },
        };
        if dim % model.feature_heads != 0 {
            model.feature_heads = 1;
        }
        run_experiment(&Experiment { model, ..base.clone() })
    })
}

/// [`decoder_sweep`] with a caller-supplied cell runner.
pub fn decoder_sweep_with(
    depths: &[usize],
    dims: &[usize],
    mut cell: impl FnMut(usize, usize) -> Result<f64>,
) -> Result<Vec<SweepRow>> {
    if depths.is_empty() || dims.is_empty() {
        return Err(Error::config("sweep needs at least one depth and one dim"));
    }
    let mut rows = Vec::with_capacity(depths.len() * dims.len());
    for &depth in depths {
        for &dim in dims {
            let top1 = cell(depth, dim).map_err(|e| e.to_string());
            rows.push(SweepRow { depth, dim, top1 });
        }
    }
    Ok(rows)
}

/// `depth,dim,top1` table; failed cells carry `error: ...` in the last column.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("depth,dim,top1\n");
    for r in rows {
        let v = match &r.top1 {
            Ok(t) => super::sig6(*t),
            Err(e) => format!("\"error: {}\"", e.replace('"', "'")),
        };
        out.push_str(&format!("{},{},{v}\n", r.depth, r.dim));
    }
    out
}
