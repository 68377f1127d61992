//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::tape::{GradSet, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct OptimizerState {
    /// First-moment estimates, index-aligned with the parameter set.
    pub m: Vec<Tensor>,
    /// Second-moment estimates.
    pub v: Vec<Tensor>,
    /// Completed steps; strictly increasing.
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        OptimizerState {
            m: params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
            v: params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
            step: 0,
            lr,
            beta1,
            beta2,
            epsilon,
        }
    }

    /// One Adam update:
    /// m <- b1*m + (1-b1)*g; v <- b2*v + (1-b2)*g^2;
    /// theta <- theta - lr * m_hat / (sqrt(v_hat) + eps).
    /// Aborts before touching anything if any gradient is non-finite.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &GradSet) -> Result<()> {
        for (id, name, _) in params.iter() {
            if !grads.get(id).all_finite() {
                return Err(Error::NanGradient { param: name.to_string() });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let corr1 = 1.0 - self.beta1.powi(t);
        let corr2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for (idx, id) in ids.into_iter().enumerate() {
            let g = grads.get(id).data();
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let theta = params.get_mut(id).data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                theta[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
