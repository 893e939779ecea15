use serde::{Deserialize, Serialize};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization.
///
/// Inference output is `gamma * (x - running_mean) / sqrt(running_var + eps) + beta`.
/// Running variance tracks the unbiased batch variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

/// Statistics of one training-mode batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance, the one used to normalize the batch.
    pub var: Vec<f64>,
    pub count: usize,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_consistent(&self) -> bool {
        let c = self.channels();
        self.beta.len() == c
            && self.running_mean.len() == c
            && self.running_var.len() == c
            && self.running_var.iter().all(|v| *v >= 0.0 && v.is_finite())
            && self.eps > 0.0
    }

    #[inline]
    pub fn running_inv_std(&self, c: usize) -> f64 {
        1.0 / (self.running_var[c] + self.eps).sqrt()
    }

    /// Inference-mode transform of one value on channel `c`.
    #[inline]
    pub fn infer(&self, c: usize, x: f64) -> f64 {
        self.gamma[c] * ((x - self.running_mean[c]) * self.running_inv_std(c)) + self.beta[c]
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        let n = stats.count as f64;
        let correction = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
        for c in 0..self.channels() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * stats.mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * stats.var[c] * correction;
        }
    }

    /// Replaces the running statistics with one batch's exact statistics, so
    /// inference mode reproduces that batch's training-mode normalization.
    pub fn freeze_to(&mut self, stats: &BatchStats) {
        self.running_mean.clone_from(&stats.mean);
        self.running_var.clone_from(&stats.var);
    }
}
