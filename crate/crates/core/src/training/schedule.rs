use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup to `peak_lr`, then cosine decay to `floor_lr` at `total_steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub total_steps: u64,
    pub warmup_fraction: f64,
    pub peak_lr: f64,
    pub floor_lr: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup fraction {} outside [0, 1)",
                self.warmup_fraction
            )));
        }
        if !(self.floor_lr >= 0.0 && self.floor_lr <= self.peak_lr && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 <= floor_lr ({}) <= peak_lr ({})",
                self.floor_lr, self.peak_lr
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("schedule with zero steps".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_fraction * self.total_steps as f64).floor() as u64
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Param(format!(
                "step {step} beyond schedule end {}",
                self.total_steps
            )));
        }
        let w = self.warmup_steps();
        if step < w {
            return Ok(self.peak_lr * step as f64 / w as f64);
        }
        let progress = (step - w) as f64 / (self.total_steps - w) as f64;
        Ok(self.floor_lr + (self.peak_lr - self.floor_lr) * 0.5 * (1.0 + (PI * progress).cos()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(floor: f64) -> Schedule {
        Schedule {
            total_steps: 1000,
            warmup_fraction: 0.05,
            peak_lr: 4e-4,
            floor_lr: floor,
        }
    }

    #[test]
    fn anchor_points() {
        let s = sched(0.0);
        assert_eq!(s.warmup_steps(), 50);
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(50).unwrap(), 4e-4);
        assert!((s.lr_at(50 + 475).unwrap() - 2e-4).abs() < 1e-18);
        assert!(s.lr_at(1000).unwrap().abs() < 1e-18);
        assert!(s.lr_at(1001).is_err());
        let f = sched(1e-5);
        assert!((f.lr_at(1000).unwrap() - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn continuous_at_junction_and_monotone() {
        let s = sched(1e-5);
        let before = s.lr_at(49).unwrap();
        let after = s.lr_at(51).unwrap();
        assert!((s.lr_at(50).unwrap() - 4e-4).abs() == 0.0);
        assert!(before < 4e-4 && after < 4e-4);
        assert!((4e-4 - before) - 4e-4 / 50.0 < 1e-15);
        for k in 51..1000 {
            assert!(s.lr_at(k).unwrap() <= s.lr_at(k - 1).unwrap());
        }
    }

    #[test]
    fn invalid() {
        let mut s = sched(0.0);
        s.warmup_fraction = 1.0;
        assert!(s.validate().is_err());
        s = sched(1.0);
        assert!(s.validate().is_err());
        assert!(sched(0.0).validate().is_ok());
    }
}
