//! Training hyperparameters and the step learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::DType;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Fractions of the run after which the rate is divided by `lr_factor`.
    pub lr_drop_points: Vec<f64>,
    pub lr_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub dtype: DType,
    /// Pad-crop-flip augmentation of training batches.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            base_lr: 0.1,
            lr_drop_points: vec![0.5, 0.75, 0.875],
            lr_factor: 10.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            dtype: DType::F32,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("lr", "must be a finite non-negative number"));
        }
        if self.lr_factor.is_nan() || self.lr_factor <= 0.0 {
            return Err(Error::config("lr_factor", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        let mut prev = 0.0;
        for &f in &self.lr_drop_points {
            if !(f > prev && f < 1.0) {
                return Err(Error::config(
                    "lr_drop_points",
                    "must be strictly increasing inside (0, 1)",
                ));
            }
            prev = f;
        }
        Ok(())
    }

    /// Epochs at which the rate drops: `floor(fraction * epochs)`.
    pub fn drop_epochs(&self) -> Vec<usize> {
        self.lr_drop_points
            .iter()
            .map(|f| (f * self.epochs as f64).floor() as usize)
            .collect()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(epoch, self)
    }
}

/// `base_lr / lr_factor^(drop points passed)`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let passed = config.drop_epochs().iter().filter(|&&d| epoch >= d).count();
    config.base_lr / config.lr_factor.powi(passed as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_hundred_epoch_schedule() {
        let c = TrainConfig {
            epochs: 400,
            ..TrainConfig::default()
        };
        assert_eq!(c.lr_at(0), 0.1);
        assert_eq!(c.lr_at(199), 0.1);
        assert_eq!(c.lr_at(200), 0.1 / 10.0);
        assert_eq!(c.lr_at(300), 0.1 / 100.0);
        assert_eq!(c.lr_at(350), 0.1 / 1000.0);
    }

    #[test]
    fn forty_epoch_drops() {
        let c = TrainConfig {
            epochs: 40,
            ..TrainConfig::default()
        };
        assert_eq!(c.drop_epochs(), vec![20, 30, 35]);
    }

    #[test]
    fn rejects_unordered_drops() {
        let c = TrainConfig {
            lr_drop_points: vec![0.5, 0.5],
            ..TrainConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config { .. })));
    }
}
