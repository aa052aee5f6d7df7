use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{LteError, Result};
use crate::model::TransformerParams;
use crate::numerics::{lit, Real, Tensor};

use super::GradientSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices only.
    pub weight_decay: f64,
    /// Fraction of the stage's steps spent ramping the rate up linearly.
    pub warmup_ratio: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_ratio: 0.06,
            clip_norm: 1.0,
        }
    }
}

/// AdamW state for one training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T = f32> {
    pub config: OptimConfig,
    pub total_steps: usize,
    /// Updates applied so far.
    pub step: usize,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub lr: f64,
    /// Norm before clipping.
    pub grad_norm: f64,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: OptimConfig, total_steps: usize) -> Self {
        Self {
            config,
            total_steps,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn warmup_steps(&self) -> usize {
        (self.config.warmup_ratio * self.total_steps as f64).ceil() as usize
    }

    /// Learning rate of the update with zero-based index `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let w = self.warmup_steps();
        if w == 0 || step >= w {
            self.config.lr
        } else {
            self.config.lr * (step + 1) as f64 / w as f64
        }
    }

    pub fn moment(&self, name: &str) -> Option<&(Tensor<T>, Tensor<T>)> {
        self.moments.get(name)
    }

    /// One bias-corrected AdamW update of every tensor named in `grads`.
    pub fn update(
        &mut self,
        params: &mut TransformerParams<T>,
        mut grads: GradientSet<T>,
    ) -> Result<StepInfo> {
        if !grads.all_finite() {
            return Err(LteError::Numeric(format!(
                "non-finite gradient at step {}",
                self.step
            )));
        }
        let grad_norm = grads.global_norm();
        if self.config.clip_norm > 0.0 && grad_norm > self.config.clip_norm {
            grads.scale(self.config.clip_norm / grad_norm);
        }
        let lr = self.lr_at(self.step);
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1: T = lit(1.0 - c.beta1.powi(t));
        let bc2: T = lit(1.0 - c.beta2.powi(t));
        let (b1, b2, eps, lr_t, decay): (T, T, T, T, T) = (
            lit(c.beta1),
            lit(c.beta2),
            lit(c.eps),
            lit(lr),
            lit(1.0 - lr * c.weight_decay),
        );
        let one = T::one();

        let mut by_name: BTreeMap<&str, &Tensor<T>> =
            grads.grads.iter().map(|(n, g)| (n.as_str(), g)).collect();
        for (name, p) in params.named_tensors_mut() {
            let Some(g) = by_name.remove(name.as_str()) else {
                continue;
            };
            p.expect_same_shape(g)?;
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let is_matrix = p.shape().len() >= 2;
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                if is_matrix {
                    *pv *= decay;
                }
                *pv -= lr_t * (*mv / bc1) / ((*vv / bc2).sqrt() + eps);
            }
        }
        if let Some(name) = by_name.keys().next() {
            return Err(LteError::InvalidArgument(format!(
                "gradient for unknown tensor {name}"
            )));
        }
        Ok(StepInfo { lr, grad_norm })
    }
}
