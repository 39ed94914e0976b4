use crate::error::{Error, Result};
use crate::losses::LossWeights;

/// Hyper-parameters of the pre-training loop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSchedule {
    /// Peak learning rate per 256 samples; the effective peak is
    /// `base_lr · batch_size / 256`.
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub mask_ratio: f64,
    pub weights: LossWeights,
    /// Contrastive temperature.
    pub tau: f64,
    /// Soft-argmax temperature of the location loss.
    pub tau_loc: f64,
    pub momentum_a: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            warmup_epochs: 40,
            total_epochs: 300,
            batch_size: 64,
            weight_decay: 0.05,
            mask_ratio: 0.75,
            weights: LossWeights::default(),
            tau: 0.2,
            tau_loc: 1.0,
            momentum_a: 0.99,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn validate(&self) -> Result<()> {
        check_loop(self.warmup_epochs, self.total_epochs, self.batch_size, self.base_lr, self.weight_decay)?;
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::config(format!(
                "mask_ratio must lie in (0, 1), got {}",
                self.mask_ratio
            )));
        }
        self.weights.validate()?;
        if !(self.tau > 0.0) || !(self.tau_loc > 0.0) {
            return Err(Error::config(format!(
                "temperatures must be positive, got tau={} tau_loc={}",
                self.tau, self.tau_loc
            )));
        }
        if !(0.0..=1.0).contains(&self.momentum_a) {
            return Err(Error::config(format!(
                "momentum must lie in [0, 1], got {}",
                self.momentum_a
            )));
        }
        Ok(())
    }
}

pub(crate) fn check_loop(warmup: usize, total: usize, batch: usize, lr: f64, wd: f64) -> Result<()> {
    if batch == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    if warmup >= total && !(warmup == 0 && total == 0) {
        return Err(Error::config(format!(
            "warmup_epochs ({warmup}) must be smaller than epochs ({total})"
        )));
    }
    if !(lr >= 0.0 && lr.is_finite()) || !(wd >= 0.0 && wd.is_finite()) {
        return Err(Error::config(format!(
            "learning rate and weight decay must be finite and non-negative, got {lr} and {wd}"
        )));
    }
    Ok(())
}

/// Linear warmup to `peak` over `warmup_steps`, then half-cosine to zero at
/// `total_steps`. Steps past the end stay at zero.
pub fn lr_at(step: u64, peak: f64, warmup_steps: u64, total_steps: u64) -> f64 {
    if step < warmup_steps {
        return peak * step as f64 / warmup_steps as f64;
    }
    if step >= total_steps {
        return 0.0;
    }
    let span = (total_steps - warmup_steps) as f64;
    let progress = (step - warmup_steps) as f64 / span;
    0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_landmarks() {
        let (peak, warm, total) = (0.004, 100, 1000);
        assert_eq!(lr_at(0, peak, warm, total), 0.0);
        assert_eq!(lr_at(50, peak, warm, total), peak / 2.0);
        assert_eq!(lr_at(100, peak, warm, total), peak);
        assert!(lr_at(1000, peak, warm, total).abs() < 1e-12);
        assert!(lr_at(999, peak, warm, total) > 0.0);
        let mid = lr_at(550, peak, warm, total);
        assert!((mid - peak / 2.0).abs() < 1e-15);
        // non-increasing after warmup
        let mut last = peak;
        for s in 100..=1000 {
            let lr = lr_at(s, peak, warm, total);
            assert!(lr <= last + 1e-18);
            last = lr;
        }
        assert_eq!(lr_at(5, 1.0, 0, 10), 0.5 * (1.0 + (std::f64::consts::PI * 0.5).cos()));
    }

    #[test]
    fn validation() {
        let base = TrainSchedule::default();
        assert!(base.validate().is_ok());
        assert_eq!(base.peak_lr(), 2.5e-4);
        let bad = TrainSchedule { mask_ratio: 1.5, ..base };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("mask_ratio"), "{msg}");
        assert!(TrainSchedule { warmup_epochs: 300, ..base }.validate().is_err());
        assert!(TrainSchedule { batch_size: 0, ..base }.validate().is_err());
        assert!(TrainSchedule { warmup_epochs: 0, total_epochs: 0, ..base }.validate().is_ok());
        assert!(TrainSchedule { tau: 0.0, ..base }.validate().is_err());
    }
}
