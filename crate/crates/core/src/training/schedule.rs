//! Reduce-on-plateau learning-rate schedule in min mode.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub patience: usize,
    pub threshold: f64,
    pub factor: f64,
    pub best_loss: f64,
    pub stall_counter: usize,
}

impl Default for PlateauSchedule {
    fn default() -> Self {
        Self::new(5, 0.001, 0.8).expect("default schedule is valid")
    }
}

impl PlateauSchedule {
    pub fn new(patience: usize, threshold: f64, factor: f64) -> Result<Self> {
        if patience == 0 || !(factor > 0.0 && factor < 1.0) || !(threshold >= 0.0) {
            return Err(Error::Config(format!(
                "invalid plateau schedule: patience {patience}, threshold {threshold}, factor {factor}"
            )));
        }
        Ok(Self {
            patience,
            threshold,
            factor,
            best_loss: f64::INFINITY,
            stall_counter: 0,
        })
    }

    /// Feeds one epoch loss; returns the multiplier to apply to the learning rate.
    ///
    /// An improvement must be strictly larger than `threshold`.
    pub fn step(&mut self, epoch_loss: f64) -> Result<f64> {
        if !epoch_loss.is_finite() {
            return Err(Error::Numeric(format!("epoch loss is {epoch_loss}")));
        }
        if epoch_loss < self.best_loss - self.threshold {
            self.best_loss = epoch_loss;
            self.stall_counter = 0;
        } else {
            self.stall_counter += 1;
        }
        if self.stall_counter > self.patience {
            self.stall_counter = 0;
            return Ok(self.factor);
        }
        Ok(1.0)
    }
}
