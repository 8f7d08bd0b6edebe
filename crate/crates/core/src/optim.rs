//! AdamW optimizer with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    /// Stage-1 training default: lr 1e-4, no weight decay.
    fn default() -> Self {
        AdamWHyper {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
pub struct OptimizerState {
    pub hyper: AdamWHyper,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(hyper: AdamWHyper, param_sizes: &[usize]) -> Self {
        OptimizerState {
            hyper,
            step: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One decoupled-weight-decay update over the tracked parameters.
    ///
    /// `grads[i]` pairs with `params[i]`. A non-finite gradient rejects the
    /// whole step before any parameter is touched.
    pub fn adamw_step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} params, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.len() || p.numel() != self.m[i].len() {
                return Err(Error::shape(format!(
                    "param {i}: numel {} vs grad {} vs moments {}",
                    p.numel(),
                    g.len(),
                    self.m[i].len()
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::data(format!(
                    "step rejected: non-finite gradient for parameter {i} at step {}",
                    self.step + 1
                )));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let data = p.data_mut();
            for i in 0..data.len() {
                m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
                v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= h.lr * (mhat / (vhat.sqrt() + h.eps));
                if h.weight_decay != 0.0 {
                    data[i] -= h.lr * h.weight_decay * data[i];
                }
            }
        }
        Ok(())
    }
}
