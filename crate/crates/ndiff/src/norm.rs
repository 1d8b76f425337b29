use crate::error::{shape_err, Result};

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;

/// Running statistics of one batch-normalization site.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(features: usize) -> Self {
        Self {
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        }
    }

    pub fn features(&self) -> usize {
        self.running_mean.len()
    }

    pub(crate) fn check(&self, features: usize) -> Result<()> {
        if self.running_mean.len() != features || self.running_var.len() != features {
            return Err(shape_err(
                "batch_norm",
                format!(
                    "state tracks {} features, input has {features}",
                    self.running_mean.len()
                ),
            ));
        }
        Ok(())
    }

    /// Exponential moving average update; the variance estimate is unbiased.
    pub(crate) fn update(&mut self, mean: &[f64], biased_var: &[f64], batch: usize) {
        let m = self.momentum;
        let correction = if batch > 1 {
            batch as f64 / (batch - 1) as f64
        } else {
            1.0
        };
        for j in 0..mean.len() {
            self.running_mean[j] = (1.0 - m) * self.running_mean[j] + m * mean[j];
            self.running_var[j] = (1.0 - m) * self.running_var[j] + m * biased_var[j] * correction;
        }
    }
}

/// Training normalizes with batch statistics and updates the running
/// estimates; evaluation is a fixed affine map from the running estimates.
pub enum BatchNormMode<'a> {
    Train(&'a mut BatchNormState),
    Eval(&'a BatchNormState),
}
