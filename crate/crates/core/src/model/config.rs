use serde::{Deserialize, Serialize};

use crate::error::{LteError, Result};
use crate::numerics::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    /// `σ(xW1 + b1)W2 + b2`
    TwoMatmul,
    /// `(silu(xW_gate) ⊙ xW_up)W_down`, no biases.
    Swiglu,
}

impl FfnKind {
    pub fn name(self) -> &'static str {
        match self {
            FfnKind::TwoMatmul => "two_matmul",
            FfnKind::Swiglu => "swiglu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "two_matmul" => Some(FfnKind::TwoMatmul),
            "swiglu" => Some(FfnKind::Swiglu),
            _ => None,
        }
    }

    /// Multiply-add FLOPs per token per intermediate neuron (both matmuls).
    pub fn flops_per_neuron(self, d_model: usize) -> f64 {
        let mats = match self {
            FfnKind::TwoMatmul => 2.0,
            FfnKind::Swiglu => 3.0,
        };
        2.0 * mats * d_model as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
    pub ffn_kind: FfnKind,
    pub activation: Activation,
    pub expert_size: usize,
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(FfnKind::TwoMatmul)
    }
}

impl ModelConfig {
    /// The CPU-sized default: 4 layers of width 128 with 16-neuron experts.
    pub fn desk(ffn_kind: FfnKind) -> Self {
        let (d_ffn, activation) = match ffn_kind {
            FfnKind::TwoMatmul => (512, Activation::GeluTanh),
            FfnKind::Swiglu => (384, Activation::Silu),
        };
        Self {
            vocab_size: 256,
            d_model: 128,
            n_heads: 4,
            n_layers: 4,
            d_ffn,
            max_seq_len: 128,
            ffn_kind,
            activation,
            expert_size: 16,
            tie_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LteError::Config(m));
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ffn", self.d_ffn),
            ("max_seq_len", self.max_seq_len),
            ("expert_size", self.expert_size),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.vocab_size > 256 {
            return bad(format!(
                "byte-level vocab_size must be <= 256, got {}",
                self.vocab_size
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !self.d_ffn.is_multiple_of(self.expert_size) {
            return bad(format!(
                "d_ffn {} not divisible by expert_size {}",
                self.d_ffn, self.expert_size
            ));
        }
        if self.ffn_kind == FfnKind::Swiglu && self.activation != Activation::Silu {
            return bad("swiglu requires activation = silu".into());
        }
        Ok(())
    }

    pub fn n_experts(&self) -> usize {
        self.d_ffn / self.expert_size
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parameter count of the dense model (no routers).
    pub fn param_count(&self) -> usize {
        let (v, d, f) = (self.vocab_size, self.d_model, self.d_ffn);
        let attn = 4 * d * d + 4 * d;
        let norms = 4 * d;
        let ffn = match self.ffn_kind {
            FfnKind::TwoMatmul => 2 * d * f + f + d,
            FfnKind::Swiglu => 3 * d * f,
        };
        let head = if self.tie_embeddings { 0 } else { d * v };
        v * d + self.max_seq_len * d + self.n_layers * (attn + norms + ffn) + 2 * d + head + v
    }

    pub fn router_param_count(&self) -> usize {
        self.n_layers * self.d_model * self.n_experts()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_defaults_are_valid() {
        let c = ModelConfig::desk(FfnKind::TwoMatmul);
        c.validate().unwrap();
        assert_eq!(c.n_experts(), 32);
        let s = ModelConfig::desk(FfnKind::Swiglu);
        s.validate().unwrap();
        assert_eq!(s.n_experts(), 24);
    }

    #[test]
    fn divisibility_is_checked() {
        let mut c = ModelConfig::default();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.expert_size = 24;
        assert!(c.validate().is_err());
    }
}
