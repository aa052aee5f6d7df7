//! Records one language-model forward pass on the tape, with the FFN of each
//! layer computed in the mode of the current training stage.

use std::collections::HashMap;

use crate::error::{invalid, Result};
use crate::losses::{
    efficiency_loss, monitored_sparsity, separability_loss, LossBreakdown, LteHyperparams,
};
use crate::model::{FfnParams, TransformerParams};
use crate::numerics::{lit, sigmoid, Activation, Real, Rng, Tensor};
use crate::routing::{top_k_indices, RouterLayer};

use super::graph::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainMode {
    Dense,
    /// Every expert scaled by its sigmoid score; routers are trained.
    Soft,
    /// Threshold selection held constant during the backward pass.
    Discrete {
        tau: f64,
    },
    /// Softmax over the top-k noisy router logits.
    NoisyTopK {
        k: usize,
        noise_std: f64,
    },
}

/// One gradient per trainable tensor, in checkpoint order. Frozen router
/// tensors are absent.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<T = f32> {
    pub grads: Vec<(String, Tensor<T>)>,
}

impl<T: Real> GradientSet<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|(_, g)| g.data())
            .map(|v| {
                let v = v.to_f64().unwrap_or(f64::NAN);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|(_, g)| g.all_finite())
    }

    pub fn scale(&mut self, s: f64) {
        let s: T = lit(s);
        for (_, g) in &mut self.grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

pub struct LmGraph<T> {
    pub graph: Graph<T>,
    /// Trainable leaves in checkpoint order.
    pub trainable: Vec<(String, Var)>,
    pub logits: Var,
    pub task: Var,
    pub loss: Var,
    /// Per-layer expert weights: sigmoid scores (soft), 0/1 masks
    /// (discrete) or top-k softmax weights.
    pub expert_weights: Vec<Var>,
    pub breakdown: LossBreakdown,
    pub sparsity: f64,
}

fn is_frozen_router<T: Real>(params: &TransformerParams<T>, name: &str) -> bool {
    let Some(rest) = name.strip_prefix("router.") else {
        return false;
    };
    let layer: usize = rest
        .split('.')
        .next()
        .and_then(|s| s.parse().ok())
        .unwrap_or(usize::MAX);
    params
        .blocks
        .get(layer)
        .and_then(|b| b.moe.as_ref())
        .is_some_and(|m| m.router.frozen)
}

/// Builds the tape for `batch` sequences. `inputs` and `targets` hold
/// `batch·seq` bytes each. `lte` adds the efficiency and separability terms
/// in soft mode. `rng` supplies the routing noise of [`TrainMode::NoisyTopK`].
pub fn build_lm_graph<T: Real>(
    params: &TransformerParams<T>,
    inputs: &[u8],
    targets: &[u8],
    batch: usize,
    mode: TrainMode,
    lte: Option<&LteHyperparams>,
    mut rng: Option<&mut Rng>,
) -> Result<LmGraph<T>> {
    let c = &params.config;
    if batch == 0 || inputs.len() != targets.len() || inputs.is_empty() || !inputs.len().is_multiple_of(batch)
    {
        return Err(invalid!(
            "{} inputs and {} targets for batch {batch}",
            inputs.len(),
            targets.len()
        ));
    }
    let seq = inputs.len() / batch;
    if seq > c.max_seq_len {
        return Err(invalid!(
            "sequence length {seq} exceeds max_seq_len {}",
            c.max_seq_len
        ));
    }
    if inputs
        .iter()
        .chain(targets)
        .any(|&t| t as usize >= c.vocab_size)
    {
        return Err(invalid!("token outside vocabulary of {}", c.vocab_size));
    }
    if mode != TrainMode::Dense {
        params.require_moe()?;
    }
    if let Some(hp) = lte {
        hp.validate()?;
    }

    let mut g = Graph::new();
    let mut vars: HashMap<String, Var> = HashMap::new();
    let mut trainable = Vec::new();
    for (name, t) in params.named_tensors() {
        let v = g.leaf(t.clone());
        if !is_frozen_router(params, &name) {
            trainable.push((name.clone(), v));
        }
        vars.insert(name, v);
    }
    let p = |name: &str| vars[name];

    let tok = g.embed(p("tok_emb"), inputs.iter().map(|&t| t as usize).collect())?;
    let pos = g.embed(p("pos_emb"), (0..inputs.len()).map(|r| r % seq).collect())?;
    let mut h = g.add(tok, pos)?;
    let mut expert_weights = Vec::new();
    let mut sparsities = Vec::new();

    for (l, block) in params.blocks.iter().enumerate() {
        let pre = format!("block.{l}");
        let a = g.layer_norm(h, p(&format!("{pre}.ln1.g")), p(&format!("{pre}.ln1.b")))?;
        let proj = |g: &mut Graph<T>, x: Var, w: &str, b: &str| -> Result<Var> {
            let m = g.matmul(x, p(&format!("{pre}.attn.{w}")))?;
            g.add_row(m, p(&format!("{pre}.attn.{b}")))
        };
        let q = proj(&mut g, a, "wq", "bq")?;
        let k = proj(&mut g, a, "wk", "bk")?;
        let v = proj(&mut g, a, "wv", "bv")?;
        let o = g.attention(q, k, v, batch, seq, c.n_heads)?;
        let o = proj(&mut g, o, "wo", "bo")?;
        h = g.add(h, o)?;

        let x = g.layer_norm(h, p(&format!("{pre}.ln2.g")), p(&format!("{pre}.ln2.b")))?;
        let ffn = |n: &str| p(&format!("{pre}.ffn.{n}"));
        let mut act = match &block.ffn.params {
            FfnParams::TwoMatmul(layer) => {
                let m = g.matmul(x, ffn("w1"))?;
                let hpre = g.add_row(m, ffn("b1"))?;
                g.act(hpre, layer.activation)
            }
            FfnParams::Glu(_) => {
                let gate = g.matmul(x, ffn("w_gate"))?;
                let gate = g.act(gate, Activation::Silu);
                let up = g.matmul(x, ffn("w_up"))?;
                g.mul(gate, up)?
            }
        };

        if mode != TrainMode::Dense {
            let moe = block
                .moe
                .as_ref()
                .ok_or_else(|| invalid!("layer {l} has no router"))?;
            let es = moe.partition.expert_size;
            let router_logits = |g: &mut Graph<T>| -> Result<Var> {
                let z = g.matmul(x, p(&RouterLayer::<T>::weight_name(l)))?;
                match moe.router.bias {
                    Some(_) => g.add_row(z, p(&RouterLayer::<T>::bias_name(l))),
                    None => Ok(z),
                }
            };
            let w = match mode {
                TrainMode::Soft => {
                    let z = router_logits(&mut g)?;
                    g.sigmoid(z)
                }
                TrainMode::Discrete { tau } => {
                    let scores = moe.router.logits(g.value(x))?.map(sigmoid);
                    let t: T = lit(tau);
                    let mask = scores.map(|s| if s > t { T::one() } else { T::zero() });
                    let off = mask.data().iter().filter(|&&m| m == T::zero()).count();
                    sparsities.push(off as f64 / mask.len() as f64);
                    g.leaf(mask)
                }
                TrainMode::NoisyTopK { k, noise_std } => {
                    let n = moe.partition.n_experts;
                    if k == 0 || k > n {
                        return Err(invalid!("k = {k} outside [1, {n}]"));
                    }
                    let z = router_logits(&mut g)?;
                    let zn = match rng.as_deref_mut() {
                        Some(r) if noise_std > 0.0 => {
                            let shape = g.value(z).shape().to_vec();
                            let noise =
                                g.leaf(Tensor::from_fn(&shape, |_| lit(r.normal() * noise_std)));
                            g.add(z, noise)?
                        }
                        _ => z,
                    };
                    let zv = g.value(zn);
                    let kept: Vec<Vec<usize>> = (0..zv.rows())
                        .map(|t| top_k_indices(zv.row(t), k))
                        .collect();
                    sparsities.push(1.0 - k as f64 / n as f64);
                    g.masked_softmax(zn, kept)?
                }
                TrainMode::Dense => unreachable!(),
            };
            act = g.group_scale(act, w, es)?;
            expert_weights.push(w);
        }

        let down = match &block.ffn.params {
            FfnParams::TwoMatmul(_) => {
                let m = g.matmul(act, ffn("w2"))?;
                g.add_row(m, ffn("b2"))?
            }
            FfnParams::Glu(_) => g.matmul(act, ffn("w_down"))?,
        };
        h = g.add(h, down)?;
    }

    let z = g.layer_norm(h, p("ln_f.g"), p("ln_f.b"))?;
    let logits = match params.lm_head {
        Some(_) => g.matmul(z, p("lm_head.w"))?,
        None => g.matmul_nt(z, p("tok_emb"))?,
    };
    let logits = g.add_row(logits, p("lm_head.b"))?;
    let task = g.cross_entropy(logits, targets)?;

    let weights: Vec<&Tensor<T>> = expert_weights.iter().map(|&w| g.value(w)).collect();
    let mean_score_per_layer = weights
        .iter()
        .map(|w| {
            w.data()
                .iter()
                .map(|v| v.to_f64().unwrap_or(f64::NAN))
                .sum::<f64>()
                / w.len() as f64
        })
        .collect();
    let task_value = g.scalar_value(task);
    let (loss, breakdown, sparsity) = match (mode, lte) {
        (TrainMode::Soft, Some(hp)) => {
            let efficiency = efficiency_loss(&weights)?;
            let separability = separability_loss(&weights, hp.tau, hp.eps)?;
            let sparsity = monitored_sparsity(&weights, hp.tau);
            let n_layers = expert_weights.len() as f64;
            let mut terms = vec![(task, 1.0)];
            for &w in &expert_weights {
                let e = g.mean_square(w);
                let s = g.mean_inv_sq_dist(w, hp.tau, hp.eps);
                terms.push((e, hp.eta / n_layers));
                terms.push((s, hp.lambda / n_layers));
            }
            let loss = g.weighted_sum(terms);
            let b = LossBreakdown {
                task: task_value,
                efficiency,
                separability,
                total: g.scalar_value(loss),
                mean_score_per_layer,
            };
            (loss, b, sparsity)
        }
        _ => {
            let sparsity = match mode {
                TrainMode::Soft => monitored_sparsity(&weights, 0.5),
                TrainMode::Dense => 0.0,
                _ => sparsities.iter().sum::<f64>() / sparsities.len().max(1) as f64,
            };
            let b = LossBreakdown {
                task: task_value,
                efficiency: 0.0,
                separability: 0.0,
                total: task_value,
                mean_score_per_layer,
            };
            (task, b, sparsity)
        }
    };
    Ok(LmGraph {
        graph: g,
        trainable,
        logits,
        task,
        loss,
        expert_weights,
        breakdown,
        sparsity,
    })
}

impl<T: Real> LmGraph<T> {
    /// Reverse pass from the stage loss.
    pub fn gradients(&self) -> Result<GradientSet<T>> {
        let all = self.graph.backward(self.loss)?;
        let grads = self
            .trainable
            .iter()
            .map(|(name, v)| {
                let g = all[v.index()]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.graph.value(*v).shape()));
                (name.clone(), g)
            })
            .collect();
        Ok(GradientSet { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::{apply_partition, group_experts_random};
    use crate::losses::task_loss;
    use crate::model::{forward_batch, FfnKind, FfnMode, ModelConfig, MoeAttachment};

    pub(crate) fn toy_config(kind: FfnKind) -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ffn: 16,
            max_seq_len: 8,
            ffn_kind: kind,
            activation: if kind == FfnKind::Swiglu {
                Activation::Silu
            } else {
                Activation::GeluTanh
            },
            expert_size: 4,
            tie_embeddings: false,
        }
    }

    fn toy_model(kind: FfnKind, seed: u64, n_layers: usize) -> TransformerParams<f64> {
        let mut c = toy_config(kind);
        c.n_layers = n_layers;
        let mut p = TransformerParams::<f64>::init(&c, &mut Rng::new(seed)).unwrap();
        let mut rng = Rng::new(seed + 1);
        for (_, t) in p.named_tensors_mut() {
            let shape = t.shape().to_vec();
            *t = rng.normal_tensor(&shape, 0.3);
        }
        for b in &mut p.blocks {
            let part = group_experts_random(16, 4, &mut rng).unwrap();
            b.ffn = apply_partition(&b.ffn, &part).unwrap();
            let router = RouterLayer {
                wg: rng.normal_tensor(&[8, 4], 0.8),
                bias: None,
                frozen: false,
            };
            b.moe = Some(MoeAttachment {
                partition: part,
                router,
            });
        }
        p
    }

    #[test]
    fn tape_logits_match_plain_forward() {
        for kind in [FfnKind::TwoMatmul, FfnKind::Swiglu] {
            let p = toy_model(kind, 3, 2);
            let inputs = [1u8, 4, 9, 2, 7, 7, 3, 0];
            let targets = [4u8, 9, 2, 0, 7, 3, 0, 5];
            for (tm, fm) in [
                (TrainMode::Dense, FfnMode::Dense),
                (TrainMode::Soft, FfnMode::MoeSoft),
                (
                    TrainMode::Discrete { tau: 0.5 },
                    FfnMode::MoeDiscrete { tau: 0.5 },
                ),
                (
                    TrainMode::NoisyTopK {
                        k: 2,
                        noise_std: 0.0,
                    },
                    FfnMode::SoftmaxTopK { k: 2 },
                ),
            ] {
                let lg = build_lm_graph(&p, &inputs, &targets, 2, tm, None, None).unwrap();
                let plain = forward_batch(&p, &inputs, 2, fm).unwrap();
                let diff = lg
                    .graph
                    .value(lg.logits)
                    .max_abs_diff(&plain.logits)
                    .unwrap();
                assert!(diff < 1e-10, "{kind:?} {tm:?}: {diff}");
                let want = task_loss(&plain.logits, &targets).unwrap();
                assert!((lg.breakdown.task - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn stage1_breakdown_is_consistent() {
        let p = toy_model(FfnKind::TwoMatmul, 4, 2);
        let hp = LteHyperparams {
            eta: 2.0,
            lambda: 0.5,
            ..Default::default()
        };
        let lg = build_lm_graph(
            &p,
            &[1, 2, 3, 4],
            &[2, 3, 4, 5],
            1,
            TrainMode::Soft,
            Some(&hp),
            None,
        )
        .unwrap();
        let b = &lg.breakdown;
        assert!(
            (b.total - (b.task + hp.eta * b.efficiency + hp.lambda * b.separability)).abs() < 1e-9
        );
        assert_eq!(b.mean_score_per_layer.len(), 2);
    }

    #[test]
    fn frozen_routers_have_no_gradient_entry() {
        let mut p = toy_model(FfnKind::TwoMatmul, 5, 1);
        p.set_routers_frozen(true);
        let lg = build_lm_graph(
            &p,
            &[1, 2, 3],
            &[2, 3, 4],
            1,
            TrainMode::Discrete { tau: 0.5 },
            None,
            None,
        )
        .unwrap();
        let gs = lg.gradients().unwrap();
        assert!(gs.get("router.0.Wg").is_none());
        assert!(gs.get("block.0.ffn.w1").is_some());
        assert!(gs.all_finite());
    }

    #[test]
    fn unselected_experts_get_exactly_zero_gradient() {
        let mut p = toy_model(FfnKind::TwoMatmul, 6, 1);
        p.set_routers_frozen(true);
        // bias the router so expert 3 is never selected
        let m = p.blocks[0].moe.as_mut().unwrap();
        m.router.bias = Some(Tensor::new(vec![4], vec![0.0, 0.0, 0.0, -100.0]).unwrap());
        let lg = build_lm_graph(
            &p,
            &[1, 2, 3, 9],
            &[2, 3, 9, 4],
            1,
            TrainMode::Discrete { tau: 0.5 },
            None,
            None,
        )
        .unwrap();
        let gs = lg.gradients().unwrap();
        let w1 = gs.get("block.0.ffn.w1").unwrap();
        let b1 = gs.get("block.0.ffn.b1").unwrap();
        let w2 = gs.get("block.0.ffn.w2").unwrap();
        for j in 12..16 {
            assert!((0..8).all(|r| w1.at(r, j) == 0.0));
            assert_eq!(b1.data()[j], 0.0);
            assert!(w2.row(j).iter().all(|&v| v == 0.0));
        }
        assert!(w1.data().iter().any(|&v| v != 0.0));
    }
}
