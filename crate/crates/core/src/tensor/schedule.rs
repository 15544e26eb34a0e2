use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning-rate schedule: linear warm-up, then either cosine decay to zero
/// or a constant plateau, with optional multiplicative drops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    #[serde(default)]
    pub cosine: bool,
    /// `(step, factor)`: the rate is multiplied by `factor` from `step` on.
    #[serde(default)]
    pub drop_steps: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn warmup_cosine(peak_lr: f64, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        let s = Self {
            peak_lr,
            warmup_steps,
            total_steps,
            cosine: true,
            drop_steps: Vec::new(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn constant_with_drops(
        lr: f64,
        total_steps: usize,
        drop_steps: Vec<(usize, f64)>,
    ) -> Result<Self> {
        let s = Self {
            peak_lr: lr,
            warmup_steps: 0,
            total_steps,
            cosine: false,
            drop_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::config(format!(
                "warmup {} exceeds total {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.peak_lr >= 0.0) {
            return Err(Error::config("peak learning rate must be >= 0"));
        }
        if self.drop_steps.iter().any(|&(_, f)| !(f >= 0.0)) {
            return Err(Error::config("drop factors must be >= 0"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::config(format!(
                "step {step} outside schedule of {} steps",
                self.total_steps
            )));
        }
        let base = if step < self.warmup_steps {
            self.peak_lr * step as f64 / self.warmup_steps as f64
        } else if self.cosine && self.total_steps > self.warmup_steps {
            let progress =
                (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
            self.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        } else {
            self.peak_lr
        };
        let factor: f64 = self
            .drop_steps
            .iter()
            .filter(|&&(at, _)| step >= at)
            .map(|&(_, f)| f)
            .product();
        Ok((base * factor).max(0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_cosine_landmarks() {
        let s = LrSchedule::warmup_cosine(0.1, 10, 110).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(10).unwrap(), 0.1);
        assert!((s.lr_at(60).unwrap() - 0.05).abs() < 1e-15);
        assert!(s.lr_at(110).unwrap().abs() < 1e-15);
        assert!(s.lr_at(111).is_err());
    }

    #[test]
    fn drops_apply_at_and_after_step() {
        let s = LrSchedule::constant_with_drops(0.1, 1000, vec![(800, 0.1)]).unwrap();
        assert_eq!(s.lr_at(799).unwrap(), 0.1);
        assert!((s.lr_at(800).unwrap() - 0.01).abs() < 1e-15);
        assert!((s.lr_at(1000).unwrap() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn warmup_longer_than_total_rejected() {
        assert!(LrSchedule::warmup_cosine(0.1, 20, 10).is_err());
    }

    #[test]
    fn non_negative_everywhere() {
        let s = LrSchedule::warmup_cosine(0.3, 7, 50).unwrap();
        assert!((0..=50).all(|t| s.lr_at(t).unwrap() >= 0.0));
    }
}
