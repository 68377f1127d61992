//! Batch-normalization state: trainable scale/shift plus running
//! statistics for eval mode.

use crate::error::Result;
use crate::tape::{BatchStats, NodeId, ParamId, ParamSet, Tape};
use crate::tensor::Tensor;

/// Whether a forward pass normalizes with batch statistics (and learns)
/// or with the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct BatchNormState {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn register(
        params: &mut ParamSet,
        name: &str,
        features: usize,
        gamma_init: f64,
        momentum: f64,
        eps: f64,
    ) -> Self {
        BatchNormState {
            name: name.to_string(),
            gamma: params.register(format!("{name}.gamma"), Tensor::full(&[features], gamma_init)),
            beta: params.register(format!("{name}.beta"), Tensor::zeros(&[features])),
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum,
            eps,
        }
    }

    /// Normalize `x[B,F]`. Train phase uses batch statistics when the
    /// batch has at least two rows; a singleton batch falls back to the
    /// running statistics (a lone pair instance cannot be normalized
    /// against itself). Eval phase always uses running statistics.
    pub fn apply(&self, tape: &mut Tape, x: NodeId, phase: Phase) -> Result<NodeId> {
        let gamma = tape.param(self.gamma);
        let beta = tape.param(self.beta);
        match phase {
            Phase::Train if tape.shape(x)[0] >= 2 => tape.batchnorm_train(x, gamma, beta, self.eps),
            _ => tape.batchnorm_eval(x, gamma, beta, self.eps, &self.running_mean, &self.running_var),
        }
    }

    /// Fold one batch's pooled statistics into the running estimates.
    pub fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        for (r, m) in self.running_mean.iter_mut().zip(mean) {
            *r = self.momentum * *r + (1.0 - self.momentum) * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(var) {
            *r = self.momentum * *r + (1.0 - self.momentum) * v;
        }
    }
}

/// Pool per-sample batch statistics into one mean/variance pair via total
/// moments, weighting each sample by its instance count.
pub fn pool_stats(stats: &[BatchStats]) -> Option<(Vec<f64>, Vec<f64>)> {
    let first = stats.first()?;
    let features = first.mean.len();
    let total: usize = stats.iter().map(|s| s.batch).sum();
    let mut mean = vec![0.0; features];
    let mut second_moment = vec![0.0; features];
    for s in stats {
        let w = s.batch as f64;
        for f in 0..features {
            mean[f] += w * s.mean[f];
            second_moment[f] += w * (s.var[f] + s.mean[f] * s.mean[f]);
        }
    }
    let t = total as f64;
    let mut var = vec![0.0; features];
    for f in 0..features {
        mean[f] /= t;
        second_moment[f] /= t;
        var[f] = (second_moment[f] - mean[f] * mean[f]).max(0.0);
    }
    Some((mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::BatchStats;

    #[test]
    fn pooled_stats_match_direct_computation() {
        // Two samples of sizes 2 and 3 over one feature.
        let a = [1.0, 3.0];
        let b = [2.0, 4.0, 6.0];
        let stat = |xs: &[f64]| -> BatchStats {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
            BatchStats { mean: vec![m], var: vec![v], batch: xs.len() }
        };
        let (mean, var) = pool_stats(&[stat(&a), stat(&b)]).unwrap();
        let all: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
        let m = all.iter().sum::<f64>() / all.len() as f64;
        let v = all.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / all.len() as f64;
        assert!((mean[0] - m).abs() < 1e-12);
        assert!((var[0] - v).abs() < 1e-12);
    }

    #[test]
    fn running_update_uses_momentum() {
        let mut params = ParamSet::new();
        let mut bn = BatchNormState::register(&mut params, "bn", 1, 1.0, 0.9, 1e-5);
        bn.update_running(&[10.0], &[5.0]);
        assert!((bn.running_mean[0] - 1.0).abs() < 1e-12); // 0.9*0 + 0.1*10
        assert!((bn.running_var[0] - 1.4).abs() < 1e-12); // 0.9*1 + 0.1*5
    }

    #[test]
    fn singleton_batch_in_train_phase_falls_back_to_running_stats() {
        let mut params = ParamSet::new();
        let bn = BatchNormState::register(&mut params, "bn", 2, 1.0, 0.9, 1e-5);
        let mut tape = Tape::new(&params);
        let x = tape.constant(Tensor::new(vec![1, 2], vec![3.0, -1.0]).unwrap());
        let y = bn.apply(&mut tape, x, Phase::Train).unwrap();
        // Running stats are mean 0 / var 1 at init.
        let out = tape.value(y);
        assert!((out[0] - 3.0 / (1.0f64 + 1e-5).sqrt()).abs() < 1e-9);
        assert!(tape.batch_stats(y).is_none());
    }
}
