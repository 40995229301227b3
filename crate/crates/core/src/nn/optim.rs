use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::real::Real;

/// Settings for [`Rmsprop`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub max_grad_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            decay: 0.999,
            eps: 1e-8,
            max_grad_norm: 5.0,
        }
    }
}

/// Momentum-free adaptive step: per-parameter scaling by a bias-corrected
/// running mean of squared gradients.
#[derive(Debug, Clone)]
pub struct Rmsprop {
    cfg: OptimizerConfig,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Rmsprop {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Rmsprop {
            cfg,
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub(crate) fn step<T: Real>(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        if self.second.is_empty() {
            self.second = params
                .iter()
                .map(|p| alloc::vec![0.0; p.tensor.numel()])
                .collect();
        }
        self.steps += 1;
        let norm = libm::sqrt(
            grads
                .iter()
                .flat_map(|g| g.data().iter())
                .map(|v| {
                    let v = v.as_f64();
                    v * v
                })
                .sum::<f64>(),
        );
        let clip = if self.cfg.max_grad_norm > 0.0 && norm > self.cfg.max_grad_norm {
            self.cfg.max_grad_norm / norm
        } else {
            1.0
        };
        let beta = self.cfg.decay;
        let correction = 1.0 - libm::pow(beta, self.steps as f64);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.second.iter_mut()) {
            for ((w, gv), s) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(v.iter_mut())
            {
                let gv = gv.as_f64() * clip;
                *s = beta * *s + (1.0 - beta) * gv * gv;
                let step = self.cfg.lr * gv / (libm::sqrt(*s / correction) + self.cfg.eps);
                *w = T::of(w.as_f64() - step);
            }
        }
    }
}
