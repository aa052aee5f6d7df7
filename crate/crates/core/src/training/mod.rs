//! Reverse-mode gradients, AdamW, and the training stages: dense base
//! training, joint router/model training in soft mode, and adaptation to
//! discrete selection with frozen routers.

mod graph;
mod lm_graph;
mod optim;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{LteError, Result};
use crate::losses::{LossBreakdown, LteHyperparams};
use crate::model::{RouterKind, TransformerParams};
use crate::numerics::{Real, Rng};

pub use graph::{Graph, Var};
pub use lm_graph::{build_lm_graph, GradientSet, LmGraph, TrainMode};
pub use optim::{AdamW, OptimConfig, StepInfo};

pub const NOISY_TOPK_TRAIN_STD: f64 = crate::routing::NOISY_TOPK_STD;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    Base,
    Moefied,
    Stage1,
    Stage2,
    TopK,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Base => "base",
            Stage::Moefied => "moefied",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::TopK => "topk",
        }
    }

    fn stream(self) -> u64 {
        self as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            seq_len: 64,
            optim: OptimConfig::default(),
            seed: 0,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: String,
    pub step: usize,
    pub lr: f64,
    pub l_task: f64,
    pub l_eff: f64,
    pub l_sep: f64,
    pub l_s1: f64,
    /// Stage 1: fraction of scores at or below τ. Stage 2: fraction of
    /// experts skipped.
    pub sparsity: f64,
    pub grad_norm: f64,
    pub mean_score_per_layer: Vec<f64>,
}

pub fn log_to_jsonl(log: &[LogRecord]) -> Result<String> {
    let mut s = String::new();
    for r in log {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub struct TrainingState<T: Real = f32> {
    pub params: TransformerParams<T>,
    pub optimizer: AdamW<T>,
    pub data_rng: Rng,
    pub noise_rng: Rng,
    pub stage: Stage,
    pub config: TrainConfig,
    pub lte: LteHyperparams,
    pub mode: TrainMode,
}

impl<T: Real> TrainingState<T> {
    /// Checks the stage preconditions and fixes the FFN mode for the stage.
    pub fn new(
        mut params: TransformerParams<T>,
        stage: Stage,
        config: TrainConfig,
        lte: LteHyperparams,
    ) -> Result<Self> {
        lte.validate()?;
        if config.batch_size == 0
            || config.seq_len == 0
            || config.seq_len > params.config.max_seq_len
        {
            return Err(LteError::Config(format!(
                "batch_size {} and seq_len {} must be >= 1, seq_len <= max_seq_len {}",
                config.batch_size, config.seq_len, params.config.max_seq_len
            )));
        }
        let mode = match stage {
            Stage::Base => {
                if params.has_any_moe() {
                    return Err(LteError::StageOrder(
                        "base training runs on a dense model".into(),
                    ));
                }
                TrainMode::Dense
            }
            Stage::Stage1 | Stage::Stage2 => {
                params
                    .require_moe()
                    .map_err(|_| LteError::StageOrder("LTE stages need a MoEfied model".into()))?;
                if params.router_kind != RouterKind::Sigmoid {
                    return Err(LteError::StageOrder(
                        "LTE stages need sigmoid routers".into(),
                    ));
                }
                if stage == Stage::Stage1 {
                    params.set_routers_frozen(false);
                    TrainMode::Soft
                } else {
                    params.set_routers_frozen(true);
                    TrainMode::Discrete { tau: lte.tau }
                }
            }
            Stage::TopK => {
                params.require_moe().map_err(|_| {
                    LteError::StageOrder("top-k training needs a MoEfied model".into())
                })?;
                let RouterKind::SoftmaxTopK { k } = params.router_kind else {
                    return Err(LteError::StageOrder(
                        "top-k training needs softmax routers".into(),
                    ));
                };
                params.set_routers_frozen(false);
                TrainMode::NoisyTopK {
                    k,
                    noise_std: NOISY_TOPK_TRAIN_STD,
                }
            }
            Stage::Init | Stage::Moefied => {
                return Err(LteError::InvalidArgument(format!(
                    "{} is not a training stage",
                    stage.name()
                )));
            }
        };
        let root = Rng::new(config.seed);
        Ok(Self {
            params,
            optimizer: AdamW::new(config.optim, config.steps),
            data_rng: root.fork(2 * stage.stream()),
            noise_rng: root.fork(2 * stage.stream() + 1),
            stage,
            config,
            lte,
            mode,
        })
    }

    fn objective(&self) -> Option<&LteHyperparams> {
        (self.stage == Stage::Stage1).then_some(&self.lte)
    }

    /// Stage loss and gradients on one batch, without updating anything.
    pub fn compute(
        &mut self,
        inputs: &[u8],
        targets: &[u8],
    ) -> Result<(LmGraph<T>, GradientSet<T>)> {
        let lte = (self.stage == Stage::Stage1).then_some(self.lte);
        let lg = build_lm_graph(
            &self.params,
            inputs,
            targets,
            self.config.batch_size,
            self.mode,
            lte.as_ref(),
            Some(&mut self.noise_rng),
        )?;
        let grads = lg.gradients()?;
        Ok((lg, grads))
    }

    /// Samples a batch, takes one optimizer step and returns its log line.
    pub fn train_step(&mut self, corpus: &Corpus) -> Result<LogRecord> {
        let (x, y) = corpus.sample_batch(
            &mut self.data_rng,
            self.config.batch_size,
            self.config.seq_len,
        )?;
        let step = self.optimizer.step;
        let (lg, grads) = self.compute(&x, &y)?;
        let info = optimizer_step(self, grads)?;
        Ok(record(self.stage, step, info, &lg.breakdown, lg.sparsity))
    }

    /// The stage loss of a fixed batch under the current parameters.
    pub fn evaluate_batch(&self, inputs: &[u8], targets: &[u8]) -> Result<LossBreakdown> {
        let lg = build_lm_graph(
            &self.params,
            inputs,
            targets,
            self.config.batch_size,
            self.mode,
            self.objective(),
            None,
        )?;
        Ok(lg.breakdown)
    }
}

fn record(
    stage: Stage,
    step: usize,
    info: StepInfo,
    b: &LossBreakdown,
    sparsity: f64,
) -> LogRecord {
    LogRecord {
        stage: stage.name().into(),
        step,
        lr: info.lr,
        l_task: b.task,
        l_eff: b.efficiency,
        l_sep: b.separability,
        l_s1: b.total,
        sparsity,
        grad_norm: info.grad_norm,
        mean_score_per_layer: b.mean_score_per_layer.clone(),
    }
}

/// Applies one AdamW update. Gradients for frozen tensors must be absent.
pub fn optimizer_step<T: Real>(
    state: &mut TrainingState<T>,
    grads: GradientSet<T>,
) -> Result<StepInfo> {
    if let Some((name, _)) = grads.grads.iter().find(|(n, _)| {
        n.starts_with("router.")
            && state
                .params
                .blocks
                .iter()
                .any(|b| b.moe.as_ref().is_some_and(|m| m.router.frozen))
    }) {
        return Err(LteError::InvalidArgument(format!(
            "gradient supplied for frozen tensor {name}"
        )));
    }
    state.optimizer.update(&mut state.params, grads)
}

fn run<T: Real>(
    params: TransformerParams<T>,
    corpus: &Corpus,
    stage: Stage,
    config: TrainConfig,
    lte: LteHyperparams,
) -> Result<(TransformerParams<T>, Vec<LogRecord>)> {
    let mut state = TrainingState::new(params, stage, config, lte)?;
    let mut log = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let r = state.train_step(corpus)?;
        log::debug!(
            "{} step {} task {:.4} total {:.4} sparsity {:.3}",
            r.stage,
            r.step,
            r.l_task,
            r.l_s1,
            r.sparsity
        );
        log.push(r);
    }
    Ok((state.params, log))
}

/// Dense next-token training from the given initialisation.
pub fn run_base<T: Real>(
    params: TransformerParams<T>,
    corpus: &Corpus,
    config: TrainConfig,
) -> Result<(TransformerParams<T>, Vec<LogRecord>)> {
    run(
        params,
        corpus,
        Stage::Base,
        config,
        LteHyperparams::default(),
    )
}

/// Joint training of routers and model in soft mode on
/// `L_task + η·L_efficiency + λ·L_separability`.
pub fn run_stage1<T: Real>(
    params: TransformerParams<T>,
    corpus: &Corpus,
    config: TrainConfig,
    lte: LteHyperparams,
) -> Result<(TransformerParams<T>, Vec<LogRecord>)> {
    run(params, corpus, Stage::Stage1, config, lte)
}

/// Freezes the routers and fine-tunes the model on `L_task` under discrete
/// selection at `lte.tau`.
pub fn run_stage2<T: Real>(
    params: TransformerParams<T>,
    corpus: &Corpus,
    config: TrainConfig,
    lte: LteHyperparams,
) -> Result<(TransformerParams<T>, Vec<LogRecord>)> {
    run(params, corpus, Stage::Stage2, config, lte)
}

/// Trains softmax top-k routers and the model jointly with routing noise.
pub fn run_topk<T: Real>(
    params: TransformerParams<T>,
    corpus: &Corpus,
    config: TrainConfig,
) -> Result<(TransformerParams<T>, Vec<LogRecord>)> {
    run(
        params,
        corpus,
        Stage::TopK,
        config,
        LteHyperparams::default(),
    )
}
