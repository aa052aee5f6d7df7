//! Flat `key = value` run configuration. Every key has a typed default;
//! unknown or repeated keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lte_core::grouping::GroupingMethod;
use lte_core::losses::LteHyperparams;
use lte_core::model::{FfnKind, ModelConfig};
use lte_core::numerics::Activation;
use lte_core::sparse_exec::{BenchConfig, BenchShape};
use lte_core::training::{OptimConfig, TrainConfig};
use lte_core::{LteError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lte: LteHyperparams,
    pub optim: OptimConfig,
    /// Learning rate of dense base training; `optim.lr` drives the later stages.
    pub base_lr: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub corpus: PathBuf,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub base_steps: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub topk_steps: usize,
    /// Intermediate checkpoint interval; 0 writes only stage boundaries.
    pub checkpoint_every: usize,
    pub grouping: GroupingMethod,
    pub eval_tokens: usize,
    pub topk_k: usize,
    pub keep_fraction: f64,
    pub bench_shapes: Vec<BenchShape>,
    pub bench_trials: usize,
    pub bench_warmups: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let bench = BenchConfig::default();
        Self {
            model: ModelConfig::desk(FfnKind::TwoMatmul),
            lte: LteHyperparams::default(),
            optim: OptimConfig::default(),
            base_lr: 3e-3,
            batch_size: 8,
            seq_len: 64,
            corpus: PathBuf::new(),
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            base_steps: 2000,
            stage1_steps: 400,
            stage2_steps: 400,
            topk_steps: 400,
            checkpoint_every: 0,
            grouping: GroupingMethod::Kmeans,
            eval_tokens: 16384,
            topk_k: 4,
            keep_fraction: 0.5,
            bench_shapes: bench.shapes,
            bench_trials: bench.trials,
            bench_warmups: bench.warmups,
        }
    }
}

fn config_err(key: &str, value: &str, what: &str) -> LteError {
    LteError::Config(format!("{key} = {value:?}: {what}"))
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| config_err(key, value, "cannot parse"))
}

fn parse_shape(key: &str, s: &str) -> Result<BenchShape> {
    // d_model x d_ffn x tokens [x kind]
    let parts: Vec<&str> = s.split('x').map(str::trim).collect();
    let num = |i: usize| -> Result<usize> { parse(key, parts[i]) };
    match parts.len() {
        3 | 4 => Ok(BenchShape {
            d_model: num(0)?,
            d_ffn: num(1)?,
            tokens: num(2)?,
            ffn_kind: match parts.get(3) {
                Some(k) => {
                    FfnKind::parse(k).ok_or_else(|| config_err(key, s, "unknown ffn kind"))?
                }
                None => FfnKind::TwoMatmul,
            },
        }),
        _ => Err(config_err(
            key,
            s,
            "expected d_model x d_ffn x tokens [x kind]",
        )),
    }
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "vocab_size",
        "d_model",
        "n_heads",
        "n_layers",
        "d_ffn",
        "max_seq_len",
        "ffn_kind",
        "activation",
        "expert_size",
        "tie_embeddings",
        "eta",
        "lambda",
        "tau",
        "sep_eps",
        "lr",
        "base_lr",
        "beta1",
        "beta2",
        "adam_eps",
        "weight_decay",
        "warmup_ratio",
        "clip_norm",
        "batch_size",
        "seq_len",
        "corpus",
        "seed",
        "out_dir",
        "base_steps",
        "stage1_steps",
        "stage2_steps",
        "topk_steps",
        "checkpoint_every",
        "grouping",
        "eval_tokens",
        "topk_k",
        "keep_fraction",
        "bench_shapes",
        "bench_trials",
        "bench_warmups",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "vocab_size" => self.model.vocab_size = parse(key, v)?,
            "d_model" => self.model.d_model = parse(key, v)?,
            "n_heads" => self.model.n_heads = parse(key, v)?,
            "n_layers" => self.model.n_layers = parse(key, v)?,
            "d_ffn" => self.model.d_ffn = parse(key, v)?,
            "max_seq_len" => self.model.max_seq_len = parse(key, v)?,
            "ffn_kind" => {
                self.model.ffn_kind =
                    FfnKind::parse(v).ok_or_else(|| config_err(key, v, "two_matmul or swiglu"))?
            }
            "activation" => {
                self.model.activation =
                    Activation::parse(v).ok_or_else(|| config_err(key, v, "unknown activation"))?
            }
            "expert_size" => self.model.expert_size = parse(key, v)?,
            "tie_embeddings" => self.model.tie_embeddings = parse(key, v)?,
            "eta" => self.lte.eta = parse(key, v)?,
            "lambda" => self.lte.lambda = parse(key, v)?,
            "tau" => self.lte.tau = parse(key, v)?,
            "sep_eps" => self.lte.eps = parse(key, v)?,
            "lr" => self.optim.lr = parse(key, v)?,
            "base_lr" => self.base_lr = parse(key, v)?,
            "beta1" => self.optim.beta1 = parse(key, v)?,
            "beta2" => self.optim.beta2 = parse(key, v)?,
            "adam_eps" => self.optim.eps = parse(key, v)?,
            "weight_decay" => self.optim.weight_decay = parse(key, v)?,
            "warmup_ratio" => self.optim.warmup_ratio = parse(key, v)?,
            "clip_norm" => self.optim.clip_norm = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "seq_len" => self.seq_len = parse(key, v)?,
            "corpus" => self.corpus = PathBuf::from(v),
            "seed" => self.seed = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "base_steps" => self.base_steps = parse(key, v)?,
            "stage1_steps" => self.stage1_steps = parse(key, v)?,
            "stage2_steps" => self.stage2_steps = parse(key, v)?,
            "topk_steps" => self.topk_steps = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "grouping" => {
                self.grouping = GroupingMethod::parse(v)
                    .ok_or_else(|| config_err(key, v, "kmeans or random"))?
            }
            "eval_tokens" => self.eval_tokens = parse(key, v)?,
            "topk_k" => self.topk_k = parse(key, v)?,
            "keep_fraction" => self.keep_fraction = parse(key, v)?,
            "bench_shapes" => {
                self.bench_shapes = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse_shape(key, s))
                    .collect::<Result<_>>()?
            }
            "bench_trials" => self.bench_trials = parse(key, v)?,
            "bench_warmups" => self.bench_warmups = parse(key, v)?,
            _ => return Err(LteError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "vocab_size" => self.model.vocab_size.to_string(),
            "d_model" => self.model.d_model.to_string(),
            "n_heads" => self.model.n_heads.to_string(),
            "n_layers" => self.model.n_layers.to_string(),
            "d_ffn" => self.model.d_ffn.to_string(),
            "max_seq_len" => self.model.max_seq_len.to_string(),
            "ffn_kind" => self.model.ffn_kind.name().into(),
            "activation" => self.model.activation.name().into(),
            "expert_size" => self.model.expert_size.to_string(),
            "tie_embeddings" => self.model.tie_embeddings.to_string(),
            "eta" => self.lte.eta.to_string(),
            "lambda" => self.lte.lambda.to_string(),
            "tau" => self.lte.tau.to_string(),
            "sep_eps" => self.lte.eps.to_string(),
            "lr" => self.optim.lr.to_string(),
            "base_lr" => self.base_lr.to_string(),
            "beta1" => self.optim.beta1.to_string(),
            "beta2" => self.optim.beta2.to_string(),
            "adam_eps" => self.optim.eps.to_string(),
            "weight_decay" => self.optim.weight_decay.to_string(),
            "warmup_ratio" => self.optim.warmup_ratio.to_string(),
            "clip_norm" => self.optim.clip_norm.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "seq_len" => self.seq_len.to_string(),
            "corpus" => self.corpus.display().to_string(),
            "seed" => self.seed.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "base_steps" => self.base_steps.to_string(),
            "stage1_steps" => self.stage1_steps.to_string(),
            "stage2_steps" => self.stage2_steps.to_string(),
            "topk_steps" => self.topk_steps.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "grouping" => self.grouping.name().into(),
            "eval_tokens" => self.eval_tokens.to_string(),
            "topk_k" => self.topk_k.to_string(),
            "keep_fraction" => self.keep_fraction.to_string(),
            "bench_shapes" => self
                .bench_shapes
                .iter()
                .map(|s| {
                    format!(
                        "{}x{}x{}x{}",
                        s.d_model,
                        s.d_ffn,
                        s.tokens,
                        s.ffn_kind.name()
                    )
                })
                .collect::<Vec<_>>()
                .join(","),
            "bench_trials" => self.bench_trials.to_string(),
            "bench_warmups" => self.bench_warmups.to_string(),
            _ => return None,
        };
        Some(s)
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LteError::Config(format!("line {}: expected key = value", i + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(LteError::Config(format!("line {}: {k} given twice", i + 1)));
            }
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LteError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Every key in canonical order; `from_text(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).unwrap_or_default());
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.lte
            .validate()
            .map_err(|e| LteError::Config(e.to_string()))?;
        let o = &self.optim;
        let positive = [("lr", o.lr), ("base_lr", self.base_lr), ("adam_eps", o.eps)];
        if let Some((k, v)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(LteError::Config(format!("{k} must be > 0, got {v}")));
        }
        let unit = [
            ("beta1", o.beta1),
            ("beta2", o.beta2),
            ("warmup_ratio", o.warmup_ratio),
        ];
        if let Some((k, v)) = unit.iter().find(|(_, v)| !(0.0..1.0).contains(v)) {
            return Err(LteError::Config(format!("{k} must lie in [0, 1), got {v}")));
        }
        if !(o.weight_decay >= 0.0 && o.clip_norm >= 0.0) {
            return Err(LteError::Config(
                "weight_decay and clip_norm must be >= 0".into(),
            ));
        }
        if self.batch_size == 0 || self.seq_len == 0 || self.seq_len > self.model.max_seq_len {
            return Err(LteError::Config(format!(
                "need batch_size >= 1 and 1 <= seq_len <= max_seq_len ({})",
                self.model.max_seq_len
            )));
        }
        if self.eval_tokens < self.seq_len {
            return Err(LteError::Config(
                "eval_tokens must cover at least one sequence".into(),
            ));
        }
        if self.topk_k == 0 || self.topk_k > self.model.n_experts() {
            return Err(LteError::Config(format!(
                "topk_k must lie in [1, {}]",
                self.model.n_experts()
            )));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(LteError::Config("keep_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn train_config(&self, steps: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: self.batch_size,
            seq_len: self.seq_len,
            optim: OptimConfig { lr, ..self.optim },
            seed: self.seed,
        }
    }

    pub fn bench_config(&self, threads: usize) -> BenchConfig {
        BenchConfig {
            shapes: self.bench_shapes.clone(),
            trials: self.bench_trials,
            warmups: self.bench_warmups,
            threads,
            seed: self.seed,
            ..BenchConfig::default()
        }
    }
}
