use serde::{Deserialize, Serialize};

use crate::error::{LteError, Result};
use crate::grouping::ExpertPartition;
use crate::numerics::{Real, Rng, Tensor};
use crate::routing::RouterLayer;

use super::{Ffn, FfnKind, FfnLayer, FfnParams, GluFfnLayer, ModelConfig};

pub const INIT_STD: f64 = 0.02;

/// How attached routers turn logits into expert weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterKind {
    /// Independent per-expert sigmoid scores compared against a threshold.
    Sigmoid,
    /// Top-k of the logits followed by a softmax over the kept ones.
    SoftmaxTopK { k: usize },
}

/// Router and grouping of one MoEfied FFN. The block's FFN weights are in the
/// expert-contiguous order of `partition` whenever this is present.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeAttachment<T = f32> {
    pub partition: ExpertPartition,
    pub router: RouterLayer<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T = f32> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub ffn: Ffn<T>,
    pub moe: Option<MoeAttachment<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams<T = f32> {
    pub config: ModelConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub lnf_g: Tensor<T>,
    pub lnf_b: Tensor<T>,
    /// `d_model × vocab`; `None` when the output projection is tied to `tok_emb`.
    pub lm_head: Option<Tensor<T>>,
    pub lm_bias: Tensor<T>,
    pub router_kind: RouterKind,
}

impl<T: Real> TransformerParams<T> {
    /// Normal(0, 0.02) projections, zero biases, unit norm gains, and output
    /// projections of each residual branch scaled by `1/√(2·n_layers)`.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ffn);
        let resid_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let tok_emb = rng.normal_tensor(&[v, d], INIT_STD);
        let pos_emb = rng.normal_tensor(&[config.max_seq_len, d], INIT_STD);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let wq = rng.normal_tensor(&[d, d], INIT_STD);
            let wk = rng.normal_tensor(&[d, d], INIT_STD);
            let wv = rng.normal_tensor(&[d, d], INIT_STD);
            let wo = rng.normal_tensor(&[d, d], resid_std);
            let params = match config.ffn_kind {
                FfnKind::TwoMatmul => FfnParams::TwoMatmul(FfnLayer {
                    w1: rng.normal_tensor(&[d, f], INIT_STD),
                    b1: Tensor::zeros(&[f]),
                    w2: rng.normal_tensor(&[f, d], resid_std),
                    b2: Tensor::zeros(&[d]),
                    activation: config.activation,
                }),
                FfnKind::Swiglu => FfnParams::Glu(GluFfnLayer {
                    w_gate: rng.normal_tensor(&[d, f], INIT_STD),
                    w_up: rng.normal_tensor(&[d, f], INIT_STD),
                    w_down: rng.normal_tensor(&[f, d], resid_std),
                }),
            };
            blocks.push(Block {
                ln1_g: Tensor::full(&[d], T::one()),
                ln1_b: Tensor::zeros(&[d]),
                wq,
                bq: Tensor::zeros(&[d]),
                wk,
                bk: Tensor::zeros(&[d]),
                wv,
                bv: Tensor::zeros(&[d]),
                wo,
                bo: Tensor::zeros(&[d]),
                ln2_g: Tensor::full(&[d], T::one()),
                ln2_b: Tensor::zeros(&[d]),
                ffn: Ffn::dense(params),
                moe: None,
            });
        }
        let lm_head = (!config.tie_embeddings).then(|| rng.normal_tensor(&[d, v], INIT_STD));
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            blocks,
            lnf_g: Tensor::full(&[d], T::one()),
            lnf_b: Tensor::zeros(&[d]),
            lm_head,
            lm_bias: Tensor::zeros(&[v]),
            router_kind: RouterKind::Sigmoid,
        })
    }

    pub fn is_moefied(&self) -> bool {
        self.blocks.iter().all(|b| b.moe.is_some())
    }

    pub fn has_any_moe(&self) -> bool {
        self.blocks.iter().any(|b| b.moe.is_some())
    }

    /// All tensors in canonical order with their checkpoint names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            let p = format!("block.{l}");
            out.extend([
                (format!("{p}.ln1.g"), &b.ln1_g),
                (format!("{p}.ln1.b"), &b.ln1_b),
                (format!("{p}.attn.wq"), &b.wq),
                (format!("{p}.attn.bq"), &b.bq),
                (format!("{p}.attn.wk"), &b.wk),
                (format!("{p}.attn.bk"), &b.bk),
                (format!("{p}.attn.wv"), &b.wv),
                (format!("{p}.attn.bv"), &b.bv),
                (format!("{p}.attn.wo"), &b.wo),
                (format!("{p}.attn.bo"), &b.bo),
                (format!("{p}.ln2.g"), &b.ln2_g),
                (format!("{p}.ln2.b"), &b.ln2_b),
            ]);
            for (n, t) in b.ffn.named_tensors() {
                out.push((format!("{p}.ffn.{n}"), t));
            }
        }
        out.push(("ln_f.g".into(), &self.lnf_g));
        out.push(("ln_f.b".into(), &self.lnf_b));
        if let Some(h) = &self.lm_head {
            out.push(("lm_head.w".into(), h));
        }
        out.push(("lm_head.b".into(), &self.lm_bias));
        for (l, b) in self.blocks.iter().enumerate() {
            if let Some(m) = &b.moe {
                out.push((RouterLayer::<T>::weight_name(l), &m.router.wg));
                if let Some(bias) = &m.router.bias {
                    out.push((RouterLayer::<T>::bias_name(l), bias));
                }
            }
        }
        out
    }

    /// Same order as [`Self::named_tensors`].
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        let mut routers = Vec::new();
        for (l, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("block.{l}");
            out.extend([
                (format!("{p}.ln1.g"), &mut b.ln1_g),
                (format!("{p}.ln1.b"), &mut b.ln1_b),
                (format!("{p}.attn.wq"), &mut b.wq),
                (format!("{p}.attn.bq"), &mut b.bq),
                (format!("{p}.attn.wk"), &mut b.wk),
                (format!("{p}.attn.bk"), &mut b.bk),
                (format!("{p}.attn.wv"), &mut b.wv),
                (format!("{p}.attn.bv"), &mut b.bv),
                (format!("{p}.attn.wo"), &mut b.wo),
                (format!("{p}.attn.bo"), &mut b.bo),
                (format!("{p}.ln2.g"), &mut b.ln2_g),
                (format!("{p}.ln2.b"), &mut b.ln2_b),
            ]);
            for (n, t) in b.ffn.named_tensors_mut() {
                out.push((format!("{p}.ffn.{n}"), t));
            }
            if let Some(m) = &mut b.moe {
                routers.push((RouterLayer::<T>::weight_name(l), &mut m.router.wg));
                if let Some(bias) = &mut m.router.bias {
                    routers.push((RouterLayer::<T>::bias_name(l), bias));
                }
            }
        }
        out.push(("ln_f.g".into(), &mut self.lnf_g));
        out.push(("ln_f.b".into(), &mut self.lnf_b));
        if let Some(h) = &mut self.lm_head {
            out.push(("lm_head.w".into(), h));
        }
        out.push(("lm_head.b".into(), &mut self.lm_bias));
        out.extend(routers);
        out
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.named_tensors()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn element_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn router_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.named_tensors()
            .into_iter()
            .filter(|(n, _)| n.starts_with("router."))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> TransformerParams<U> {
        TransformerParams {
            config: self.config.clone(),
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1_g: b.ln1_g.cast(),
                    ln1_b: b.ln1_b.cast(),
                    wq: b.wq.cast(),
                    bq: b.bq.cast(),
                    wk: b.wk.cast(),
                    bk: b.bk.cast(),
                    wv: b.wv.cast(),
                    bv: b.bv.cast(),
                    wo: b.wo.cast(),
                    bo: b.bo.cast(),
                    ln2_g: b.ln2_g.cast(),
                    ln2_b: b.ln2_b.cast(),
                    ffn: b.ffn.cast(),
                    moe: b.moe.as_ref().map(|m| MoeAttachment {
                        partition: m.partition.clone(),
                        router: m.router.cast(),
                    }),
                })
                .collect(),
            lnf_g: self.lnf_g.cast(),
            lnf_b: self.lnf_b.cast(),
            lm_head: self.lm_head.as_ref().map(Tensor::cast),
            lm_bias: self.lm_bias.cast(),
            router_kind: self.router_kind,
        }
    }

    /// Freezes or unfreezes every attached router.
    pub fn set_routers_frozen(&mut self, frozen: bool) {
        for b in &mut self.blocks {
            if let Some(m) = &mut b.moe {
                m.router.frozen = frozen;
            }
        }
    }

    pub fn require_moe(&self) -> Result<()> {
        if self.is_moefied() {
            Ok(())
        } else {
            Err(LteError::InvalidArgument(
                "mode needs routers and partitions attached to every layer".into(),
            ))
        }
    }
}
