use crate::error::{invalid, Result};
use crate::numerics::{causal_attention, layer_norm, matmul, matmul_nt, Real, Tensor};
use crate::routing::{
    groundtruth_topk_select, magnitude_select, moe_forward_discrete, moe_forward_soft,
    noisy_topk_forward, router_topk_forward, RoutingDecision,
};

use super::{Block, TransformerParams};

/// How each FFN call is computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FfnMode {
    Dense,
    /// Every expert scaled by its router score.
    MoeSoft,
    /// Experts with router score strictly above `tau`, on the packed path.
    MoeDiscrete {
        tau: f64,
    },
    /// Softmax over the top-k router logits (no noise).
    SoftmaxTopK {
        k: usize,
    },
    /// Per-token neuron selection by true activation magnitude.
    Magnitude {
        keep_fraction: f64,
    },
    /// Top-k experts by the norm of their true activations.
    GroundTruthTopK {
        k: usize,
    },
    /// Top-k experts by router score, summed unweighted.
    RouterTopK {
        k: usize,
    },
}

impl FfnMode {
    pub fn needs_routers(self) -> bool {
        matches!(
            self,
            FfnMode::MoeSoft
                | FfnMode::MoeDiscrete { .. }
                | FfnMode::SoftmaxTopK { .. }
                | FfnMode::RouterTopK { .. }
        )
    }

    pub fn needs_partitions(self) -> bool {
        self.needs_routers() || matches!(self, FfnMode::GroundTruthTopK { .. })
    }
}

#[derive(Debug, Clone)]
pub struct LmOutput<T = f32> {
    /// `T × vocab`, rows ordered `b·seq + t`.
    pub logits: Tensor<T>,
    /// One entry per layer; `None` for dense FFN calls.
    pub decisions: Vec<Option<RoutingDecision<T>>>,
}

/// Logits for one byte sequence.
pub fn forward_lm<T: Real>(
    params: &TransformerParams<T>,
    tokens: &[u8],
    mode: FfnMode,
) -> Result<LmOutput<T>> {
    forward_batch(params, tokens, 1, mode)
}

/// Logits for `batch` equal-length sequences stored back to back in `tokens`.
pub fn forward_batch<T: Real>(
    params: &TransformerParams<T>,
    tokens: &[u8],
    batch: usize,
    mode: FfnMode,
) -> Result<LmOutput<T>> {
    let c = &params.config;
    if batch == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(batch) {
        return Err(invalid!(
            "{} tokens do not split into {batch} sequences",
            tokens.len()
        ));
    }
    let seq = tokens.len() / batch;
    if seq > c.max_seq_len {
        return Err(invalid!(
            "sequence length {seq} exceeds max_seq_len {}",
            c.max_seq_len
        ));
    }
    if mode.needs_partitions() {
        params.require_moe()?;
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
        return Err(invalid!("token {t} outside vocabulary of {}", c.vocab_size));
    }

    let d = c.d_model;
    let mut h = Tensor::from_fn(&[tokens.len(), d], |i| {
        let (r, j) = (i / d, i % d);
        params.tok_emb.at(tokens[r] as usize, j) + params.pos_emb.at(r % seq, j)
    });
    let mut decisions = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        h = h.add(&attention_branch(block, &h, batch, seq, c.n_heads)?)?;
        let (x, _) = layer_norm(&h, block.ln2_g.data(), block.ln2_b.data())?;
        let (y, decision) = ffn_branch(block, &x, mode)?;
        h = h.add(&y)?;
        decisions.push(decision);
    }
    let (z, _) = layer_norm(&h, params.lnf_g.data(), params.lnf_b.data())?;
    let logits = match &params.lm_head {
        Some(w) => matmul(&z, w)?,
        None => matmul_nt(&z, &params.tok_emb)?,
    };
    Ok(LmOutput {
        logits: logits.add_row_vector(params.lm_bias.data())?,
        decisions,
    })
}

fn attention_branch<T: Real>(
    block: &Block<T>,
    h: &Tensor<T>,
    batch: usize,
    seq: usize,
    heads: usize,
) -> Result<Tensor<T>> {
    let (a, _) = layer_norm(h, block.ln1_g.data(), block.ln1_b.data())?;
    let q = matmul(&a, &block.wq)?.add_row_vector(block.bq.data())?;
    let k = matmul(&a, &block.wk)?.add_row_vector(block.bk.data())?;
    let v = matmul(&a, &block.wv)?.add_row_vector(block.bv.data())?;
    let (o, _) = causal_attention(&q, &k, &v, batch, seq, heads)?;
    matmul(&o, &block.wo)?.add_row_vector(block.bo.data())
}

fn ffn_branch<T: Real>(
    block: &Block<T>,
    x: &Tensor<T>,
    mode: FfnMode,
) -> Result<(Tensor<T>, Option<RoutingDecision<T>>)> {
    let moe = || {
        block
            .moe
            .as_ref()
            .ok_or_else(|| invalid!("layer has no router attached"))
    };
    let (y, d) = match mode {
        FfnMode::Dense => return Ok((block.ffn.forward(x)?, None)),
        FfnMode::MoeSoft => {
            let m = moe()?;
            moe_forward_soft(&block.ffn, &m.partition, &m.router, x)?
        }
        FfnMode::MoeDiscrete { tau } => {
            let m = moe()?;
            moe_forward_discrete(&block.ffn, &m.partition, &m.router, x, tau)?
        }
        FfnMode::SoftmaxTopK { k } => {
            let m = moe()?;
            noisy_topk_forward(&block.ffn, &m.partition, &m.router, x, k, 0.0, None)?
        }
        FfnMode::Magnitude { keep_fraction } => magnitude_select(&block.ffn, x, keep_fraction)?,
        FfnMode::GroundTruthTopK { k } => {
            groundtruth_topk_select(&block.ffn, &moe()?.partition, x, k)?
        }
        FfnMode::RouterTopK { k } => {
            let m = moe()?;
            router_topk_forward(&block.ffn, &m.partition, &m.router, x, k)?
        }
    };
    Ok((y, Some(d)))
}
