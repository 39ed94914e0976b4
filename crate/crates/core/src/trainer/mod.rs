//! Pre-training and fine-tuning loops, checkpoints and the decoder sweep.

mod checkpoint;
mod finetune;
mod optim;
mod pretrain;
mod schedule;
mod sweep;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use finetune::{classify, finetune, EvalReport, FinetuneSchedule};
pub use optim::{decays, AdamW};
pub use pretrain::{
    evaluate_pretrain, forward, pretrain, pretrain_step, sample_plans, Forward, PretrainOptions, PretrainOutcome,
    StepOutput, TrainState, ViewPlans,
};
pub use schedule::{lr_at, TrainSchedule};
pub use sweep::{decoder_sweep, decoder_sweep_with, run_experiment, sweep_csv, Experiment, SweepRow};

use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,recon,loc,ctr,total,lr,loc_acc";

/// One row of the metrics log: per-epoch means of the step losses, the
/// learning rate of the epoch's last step and the hard location accuracy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub recon: f64,
    pub loc: f64,
    pub ctr: f64,
    pub total: f64,
    pub lr: f64,
    pub loc_acc: f64,
}

impl EpochMetrics {
    pub const WIDTH: usize = 7;

    pub fn to_row(&self) -> [f64; 7] {
        [self.epoch as f64, self.recon, self.loc, self.ctr, self.total, self.lr, self.loc_acc]
    }

    pub fn from_row(r: &[f64]) -> Self {
        Self {
            epoch: r[0] as usize,
            recon: r[1],
            loc: r[2],
            ctr: r[3],
            total: r[4],
            lr: r[5],
            loc_acc: r[6],
        }
    }

    pub fn csv_row(&self) -> String {
        let body: Vec<String> = self.to_row()[1..].iter().map(|&v| sig6(v)).collect();
        format!("{},{}", self.epoch, body.join(","))
    }
}

/// Six significant digits in plain decimal notation.
pub fn sig6(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}").to_lowercase();
    }
    if v == 0.0 {
        return "0".into();
    }
    let mag = v.abs().log10().floor() as i32;
    let decimals = (5 - mag).max(0) as usize;
    let rounded = if mag > 5 {
        let unit = 10f64.powi(mag - 5);
        (v / unit).round() * unit
    } else {
        v
    };
    let s = format!("{rounded:.decimals$}");
    // rounding may carry into a new digit (9.999995 -> 10.00000)
    let digits = s.chars().filter(char::is_ascii_digit).skip_while(|&c| c == '0').count();
    if digits > 6 && decimals > 0 {
        format!("{rounded:.prec$}", prec = decimals - 1)
    } else {
        s
    }
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for h in history {
        out.push_str(&h.csv_row());
        out.push('\n');
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Derives an independent 64-bit seed from a base seed and two counters.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(1.0), "1.00000");
        assert_eq!(sig6(0.123456789), "0.123457");
        assert_eq!(sig6(123456.7), "123457");
        assert_eq!(sig6(12345678.0), "12345700");
        assert_eq!(sig6(-2.5e-4), "-0.000250000");
        assert_eq!(sig6(9.999999), "10.0000");
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(f64::NAN), "nan");
    }

    #[test]
    fn csv_layout() {
        let h = EpochMetrics {
            epoch: 2,
            recon: 0.5,
            loc: 0.25,
            ctr: 1.0,
            total: 0.85,
            lr: 1e-3,
            loc_acc: 0.125,
        };
        assert_eq!(
            metrics_csv(&[h]),
            "epoch,recon,loc,ctr,total,lr,loc_acc\n2,0.500000,0.250000,1.00000,0.850000,0.00100000,0.125000\n"
        );
        assert_eq!(EpochMetrics::from_row(&h.to_row()), h);
    }
}
