//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: ParamSet,
    pub v: ParamSet,
    pub t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        Self { config, m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    /// Descends along `grads`. Pass a negated gradient to ascend.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return dim_err("Adam: parameter, gradient and state groups differ");
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads.get(i);
            if g.shape() != params.get(i).shape() {
                return dim_err(format!(
                    "Adam: gradient {:?} for parameter {:?}",
                    g.shape(),
                    params.get(i).shape()
                ));
            }
            let m = self.m.get_mut(i).data_mut();
            for (mj, gj) in m.iter_mut().zip(g.data()) {
                *mj = beta1 * *mj + (1.0 - beta1) * gj;
            }
            let v = self.v.get_mut(i).data_mut();
            for (vj, gj) in v.iter_mut().zip(g.data()) {
                *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
            }
            let (m, v) = (self.m.get(i).data(), self.v.get(i).data());
            let p = params.get_mut(i).data_mut();
            for j in 0..p.len() {
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
