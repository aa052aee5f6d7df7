//! Language-model cross-entropy and the two router regularisers: the
//! efficiency term (mean squared score) and the separability term (inverse
//! squared distance from the threshold, guarded near the threshold).
//!
//! Both regularisers average over tokens, experts and layers, so their scale
//! does not depend on batch size.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, LteError, Result};
use crate::numerics::{log_softmax_row, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LteHyperparams {
    /// Efficiency coefficient.
    pub eta: f64,
    /// Separability coefficient.
    pub lambda: f64,
    pub tau: f64,
    /// Lower bound on the squared distance from `tau` in the separability term.
    pub eps: f64,
}

impl Default for LteHyperparams {
    fn default() -> Self {
        Self {
            eta: 1.0,
            lambda: 0.5,
            tau: 0.5,
            eps: 1e-3,
        }
    }
}

impl LteHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.lambda >= 0.0) {
            return Err(invalid!(
                "eta and lambda must be >= 0 (eta {}, lambda {})",
                self.eta,
                self.lambda
            ));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(invalid!("tau must lie in (0, 1), got {}", self.tau));
        }
        if !(self.eps > 0.0) {
            return Err(invalid!("eps must be > 0, got {}", self.eps));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub efficiency: f64,
    pub separability: f64,
    pub total: f64,
    pub mean_score_per_layer: Vec<f64>,
}

/// Mean next-token cross-entropy. `targets[t]` is the byte following row `t`.
pub fn task_loss<T: Real>(logits: &Tensor<T>, targets: &[u8]) -> Result<f64> {
    if logits.rows() != targets.len() || targets.is_empty() {
        return Err(shape_err!(
            "{} logit rows for {} targets",
            logits.rows(),
            targets.len()
        ));
    }
    let mut s = 0.0;
    for (t, &y) in targets.iter().enumerate() {
        let row = logits.row(t);
        if y as usize >= row.len() {
            return Err(invalid!("target {y} outside vocabulary of {}", row.len()));
        }
        s -= log_softmax_row(row)[y as usize]
            .to_f64()
            .unwrap_or(f64::NAN);
    }
    Ok(s / targets.len() as f64)
}

pub fn perplexity(loss: f64) -> f64 {
    loss.exp()
}

fn check_scores<T: Real>(scores: &[&Tensor<T>]) -> Result<()> {
    if scores.is_empty() || scores.iter().any(|s| s.is_empty()) {
        return Err(invalid!("empty score set"));
    }
    Ok(())
}

fn layer_mean<T: Real>(s: &Tensor<T>, f: impl Fn(f64) -> f64) -> f64 {
    s.data()
        .iter()
        .map(|v| f(v.to_f64().unwrap_or(f64::NAN)))
        .sum::<f64>()
        / s.len() as f64
}

/// `(1/(L·N)) Σ_l Σ_i mean_t G²`.
pub fn efficiency_loss<T: Real>(scores: &[&Tensor<T>]) -> Result<f64> {
    check_scores(scores)?;
    Ok(scores.iter().map(|s| layer_mean(s, |g| g * g)).sum::<f64>() / scores.len() as f64)
}

/// Per-score separability term `1 / max((g − τ)², ε)`.
pub fn separability_term(g: f64, tau: f64, eps: f64) -> f64 {
    1.0 / ((g - tau) * (g - tau)).max(eps)
}

/// `(1/(L·N)) Σ_l Σ_i mean_t 1/max((G − τ)², ε)`.
pub fn separability_loss<T: Real>(scores: &[&Tensor<T>], tau: f64, eps: f64) -> Result<f64> {
    check_scores(scores)?;
    if !(eps > 0.0) {
        return Err(invalid!("eps must be > 0"));
    }
    Ok(scores
        .iter()
        .map(|s| layer_mean(s, |g| separability_term(g, tau, eps)))
        .sum::<f64>()
        / scores.len() as f64)
}

/// `L_task + η·L_efficiency + λ·L_separability`.
pub fn stage1_loss<T: Real>(
    task: f64,
    scores: &[&Tensor<T>],
    hp: &LteHyperparams,
) -> Result<LossBreakdown> {
    hp.validate()?;
    let efficiency = efficiency_loss(scores)?;
    let separability = separability_loss(scores, hp.tau, hp.eps)?;
    let total = task + hp.eta * efficiency + hp.lambda * separability;
    if !total.is_finite() {
        return Err(LteError::Numeric(format!(
            "non-finite stage-1 loss (task {task}, efficiency {efficiency}, separability {separability})"
        )));
    }
    Ok(LossBreakdown {
        task,
        efficiency,
        separability,
        total,
        mean_score_per_layer: scores.iter().map(|s| layer_mean(s, |g| g)).collect(),
    })
}

/// Fraction of scores at or below `tau`, i.e. experts a discrete router would skip.
pub fn monitored_sparsity<T: Real>(scores: &[&Tensor<T>], tau: f64) -> f64 {
    let total: usize = scores.iter().map(|s| s.len()).sum();
    if total == 0 {
        return 0.0;
    }
    let off: usize = scores
        .iter()
        .map(|s| {
            s.data()
                .iter()
                .filter(|v| v.to_f64().unwrap_or(f64::NAN) <= tau)
                .count()
        })
        .sum();
    off as f64 / total as f64
}
