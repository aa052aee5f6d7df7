//! One function per subcommand. Outputs depend only on (config, inputs);
//! nothing written carries a path, a timestamp or a host name.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use lte_core::analysis::{
    histogram_svg, layer_sparsity_report, sparsity_svg, LayerRouting, SparsityReport,
};
use lte_core::checkpoint::{self, Manifest, MANIFEST_FILE, WEIGHTS_FILE};
use lte_core::corpus::{content_hash, synthetic_text, Corpus};
use lte_core::grouping;
use lte_core::losses::{perplexity, task_loss};
use lte_core::model::{forward_lm, FfnMode, RouterKind, TransformerParams};
use lte_core::numerics::Rng;
use lte_core::routing::random_router_init;
use lte_core::sparse_exec::{bench as run_bench, flops_per_token, BenchReport, FlopsReport};
use lte_core::training::{log_to_jsonl, LogRecord, Stage, TrainingState};
use lte_core::{LteError, Result};

use crate::config::RunConfig;

pub const THREADS_ENV: &str = "LTE_THREADS";
pub const LOG_FILE: &str = "log.jsonl";
pub const LEDGER_FILE: &str = "results.jsonl";

/// Sizes the global worker pool from `LTE_THREADS` (default: rayon's
/// choice) and returns the thread count in effect.
pub fn init_threads() -> Result<usize> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            LteError::Config(format!("{THREADS_ENV}={v:?} is not a positive integer"))
        })?;
        // a second initialisation in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(threads())
}

pub fn threads() -> usize {
    rayon::current_num_threads()
}

pub fn gen_corpus(path: &Path, bytes: usize, seed: u64) -> Result<String> {
    let text = synthetic_text(bytes, seed);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, &text)?;
    Ok(content_hash(text.as_bytes()))
}

pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    if cfg.corpus.as_os_str().is_empty() {
        return Err(LteError::Config(
            "no corpus configured (set corpus = <file>)".into(),
        ));
    }
    Corpus::load(&cfg.corpus)
}

/// Validation windows used by every evaluation and report.
pub fn eval_windows(cfg: &RunConfig, corpus: &Corpus) -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
    corpus.val_batches(1, cfg.seq_len, cfg.eval_tokens)
}

fn provenance(
    cfg: &RunConfig,
    corpus: &Corpus,
    extra: &[(&str, String)],
) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("seed".into(), cfg.seed.to_string());
    m.insert("corpus_sha256".into(), content_hash(&corpus_bytes(corpus)));
    for (k, v) in extra {
        m.insert((*k).into(), v.clone());
    }
    m
}

fn corpus_bytes(c: &Corpus) -> Vec<u8> {
    [c.train(), c.val()].concat()
}

fn load_checkpoint(dir: &Path) -> Result<(TransformerParams<f32>, Manifest)> {
    checkpoint::load(dir)
}

/// Runs `state` to completion, writing intermediate checkpoints every
/// `cfg.checkpoint_every` steps, the final checkpoint and the log to `out`.
fn drive(
    cfg: &RunConfig,
    mut state: TrainingState<f32>,
    corpus: &Corpus,
    out: &Path,
    meta: BTreeMap<String, String>,
) -> Result<Vec<LogRecord>> {
    let steps = state.config.steps;
    let stage = state.stage;
    let mut log = Vec::with_capacity(steps);
    for i in 0..steps {
        let r = state.train_step(corpus)?;
        if i % 50 == 0 || i + 1 == steps {
            log::info!(
                "{} step {}/{steps}: task {:.4} total {:.4} sparsity {:.3}",
                r.stage,
                i + 1,
                r.l_task,
                r.l_s1,
                r.sparsity
            );
        }
        log.push(r);
        if cfg.checkpoint_every > 0 && (i + 1) % cfg.checkpoint_every == 0 && i + 1 < steps {
            checkpoint::save(
                &out.join(format!("step_{}", i + 1)),
                &state.params,
                stage,
                meta.clone(),
            )?;
        }
    }
    checkpoint::save(out, &state.params, stage, meta)?;
    fs::write(out.join(LOG_FILE), log_to_jsonl(&log)?)?;
    Ok(log)
}

/// Dense training from the seeded initialisation.
pub fn train_base(cfg: &RunConfig, out: &Path) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    let corpus = load_corpus(cfg)?;
    let params = TransformerParams::<f32>::init(&cfg.model, &mut Rng::new(cfg.seed))?;
    let tc = cfg.train_config(cfg.base_steps, cfg.base_lr);
    let state = TrainingState::new(params, Stage::Base, tc, cfg.lte)?;
    let meta = provenance(cfg, &corpus, &[("steps", cfg.base_steps.to_string())]);
    drive(cfg, state, &corpus, out, meta)
}

/// Groups the neurons of a dense checkpoint and attaches fresh routers.
pub fn moefy(cfg: &RunConfig, ckpt: &Path, out: &Path) -> Result<()> {
    let (params, manifest) = load_checkpoint(ckpt)?;
    if !matches!(manifest.stage, Stage::Init | Stage::Base) {
        return Err(LteError::StageOrder(format!(
            "moefy needs a dense checkpoint, got stage {}",
            manifest.stage.name()
        )));
    }
    let mut rng = Rng::new(cfg.seed).fork(100);
    let moe = grouping::moefy(&params, cfg.grouping, cfg.model.expert_size, &mut rng)?;
    let mut meta = manifest.meta;
    meta.insert("grouping".into(), cfg.grouping.name().into());
    checkpoint::save(out, &moe, Stage::Moefied, meta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LteStage {
    One,
    Two,
}

impl LteStage {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "1" => Some(Self::One),
            "2" => Some(Self::Two),
            _ => None,
        }
    }
}

/// Stage 1 (soft routing with the auxiliary losses) or stage 2 (frozen
/// routers, discrete selection).
pub fn train_lte(
    cfg: &RunConfig,
    ckpt: &Path,
    out: &Path,
    stage: LteStage,
) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    let corpus = load_corpus(cfg)?;
    let (params, manifest) = load_checkpoint(ckpt)?;
    let (stage, steps, allowed): (Stage, usize, &[Stage]) = match stage {
        LteStage::One => (
            Stage::Stage1,
            cfg.stage1_steps,
            &[Stage::Moefied, Stage::Stage1],
        ),
        LteStage::Two => (
            Stage::Stage2,
            cfg.stage2_steps,
            &[Stage::Stage1, Stage::Stage2],
        ),
    };
    if !allowed.contains(&manifest.stage) {
        return Err(LteError::StageOrder(format!(
            "{} cannot start from a {} checkpoint",
            stage.name(),
            manifest.stage.name()
        )));
    }
    let state = TrainingState::new(
        params,
        stage,
        cfg.train_config(steps, cfg.optim.lr),
        cfg.lte,
    )?;
    let mut meta = manifest.meta;
    meta.insert(format!("{}_steps", stage.name()), steps.to_string());
    meta.insert("eta".into(), cfg.lte.eta.to_string());
    meta.insert("lambda".into(), cfg.lte.lambda.to_string());
    meta.insert("tau".into(), cfg.lte.tau.to_string());
    drive(cfg, state, &corpus, out, meta)
}

/// Noisy top-k softmax routing baseline, trained from a MoEfied checkpoint.
pub fn train_topk(cfg: &RunConfig, ckpt: &Path, out: &Path) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    let corpus = load_corpus(cfg)?;
    let (mut params, manifest) = load_checkpoint(ckpt)?;
    if manifest.stage != Stage::Moefied {
        return Err(LteError::StageOrder(format!(
            "top-k training starts from a moefied checkpoint, got {}",
            manifest.stage.name()
        )));
    }
    params.router_kind = RouterKind::SoftmaxTopK { k: cfg.topk_k };
    let state = TrainingState::new(
        params,
        Stage::TopK,
        cfg.train_config(cfg.topk_steps, cfg.optim.lr),
        cfg.lte,
    )?;
    let mut meta = manifest.meta;
    meta.insert("topk_k".into(), cfg.topk_k.to_string());
    drive(cfg, state, &corpus, out, meta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMethod {
    Lte,
    Dejavu,
    MoeficationGt,
    RandomRouter,
    Dense,
    NoisyTopk,
}

impl EvalMethod {
    pub const ALL: [EvalMethod; 6] = [
        EvalMethod::Lte,
        EvalMethod::Dejavu,
        EvalMethod::MoeficationGt,
        EvalMethod::RandomRouter,
        EvalMethod::Dense,
        EvalMethod::NoisyTopk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EvalMethod::Lte => "lte",
            EvalMethod::Dejavu => "dejavu",
            EvalMethod::MoeficationGt => "moefication_gt",
            EvalMethod::RandomRouter => "random_router",
            EvalMethod::Dense => "dense",
            EvalMethod::NoisyTopk => "noisy_topk",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub method: String,
    /// The method's knob, e.g. `tau=0.5`.
    pub setting: String,
    pub stage: String,
    pub checkpoint_sha256: String,
    pub eval_sha256: String,
    pub tokens: usize,
    pub val_loss: f64,
    pub perplexity: f64,
    /// Equal-weight mean of `layer_sparsity`.
    pub mean_sparsity: f64,
    pub layer_sparsity: Vec<f64>,
    pub flops: FlopsReport,
    pub threads: usize,
}

pub fn checkpoint_hash(dir: &Path) -> Result<String> {
    let mut bytes = fs::read(dir.join(MANIFEST_FILE))?;
    bytes.extend(fs::read(dir.join(WEIGHTS_FILE))?);
    Ok(content_hash(&bytes))
}

/// Chooses the forward mode for `method`, adjusting the parameters where the
/// method brings its own router, and rejects incompatible checkpoints.
fn method_mode(
    cfg: &RunConfig,
    method: EvalMethod,
    params: &mut TransformerParams<f32>,
    stage: Stage,
) -> Result<(FfnMode, String)> {
    let incompatible = |why: &str| {
        Err(LteError::InvalidArgument(format!(
            "method {} cannot evaluate a {} checkpoint: {why}",
            method.name(),
            stage.name()
        )))
    };
    let k = cfg.topk_k;
    Ok(match method {
        EvalMethod::Dense => (FfnMode::Dense, String::new()),
        EvalMethod::Dejavu => (
            FfnMode::Magnitude {
                keep_fraction: cfg.keep_fraction,
            },
            format!("keep_fraction={}", cfg.keep_fraction),
        ),
        EvalMethod::Lte => {
            if !matches!(stage, Stage::Stage1 | Stage::Stage2)
                || params.router_kind != RouterKind::Sigmoid
            {
                return incompatible("needs a stage-1 or stage-2 checkpoint with sigmoid routers");
            }
            (
                FfnMode::MoeDiscrete { tau: cfg.lte.tau },
                format!("tau={}", cfg.lte.tau),
            )
        }
        EvalMethod::MoeficationGt | EvalMethod::RandomRouter => {
            if !params.is_moefied() {
                return incompatible("needs expert partitions");
            }
            if k > params.config.n_experts() {
                return incompatible("topk_k exceeds the expert count");
            }
            if method == EvalMethod::MoeficationGt {
                (FfnMode::GroundTruthTopK { k }, format!("k={k}"))
            } else {
                let mut rng = Rng::new(cfg.seed).fork(200);
                let (d, n) = (params.config.d_model, params.config.n_experts());
                for b in &mut params.blocks {
                    if let Some(m) = &mut b.moe {
                        m.router = random_router_init(d, n, &mut rng);
                    }
                }
                (FfnMode::RouterTopK { k }, format!("k={k}"))
            }
        }
        EvalMethod::NoisyTopk => {
            let RouterKind::SoftmaxTopK { k } = params.router_kind else {
                return incompatible("needs a top-k trained checkpoint");
            };
            (FfnMode::SoftmaxTopK { k }, format!("k={k}"))
        }
    })
}

/// Validation perplexity, sparsity and FLOPs of `method` on a checkpoint.
pub fn eval(cfg: &RunConfig, ckpt: &Path, method: EvalMethod) -> Result<EvalRecord> {
    cfg.validate()?;
    let corpus = load_corpus(cfg)?;
    let (mut params, manifest) = load_checkpoint(ckpt)?;
    if cfg.seq_len > params.config.max_seq_len {
        return Err(LteError::Config(
            "seq_len exceeds the checkpoint's max_seq_len".into(),
        ));
    }
    let (mode, setting) = method_mode(cfg, method, &mut params, manifest.stage)?;
    let windows = eval_windows(cfg, &corpus)?;
    let outs = windows
        .par_iter()
        .map(|(x, y)| {
            let o = forward_lm(&params, x, mode)?;
            Ok((task_loss(&o.logits, y)? * y.len() as f64, o.decisions))
        })
        .collect::<Result<Vec<_>>>()?;
    let tokens: usize = windows.iter().map(|(_, y)| y.len()).sum();
    let val_loss = outs.iter().map(|(l, _)| l).sum::<f64>() / tokens as f64;
    if !val_loss.is_finite() {
        return Err(LteError::Numeric(format!("validation loss is {val_loss}")));
    }
    let n_layers = params.config.n_layers;
    let layer_sparsity = (0..n_layers)
        .map(|l| {
            let ds: Option<Vec<_>> = outs.iter().map(|(_, d)| d[l].as_ref()).collect();
            Ok(match ds {
                Some(ds) => LayerRouting::from_decisions(&ds)?.sparsity(),
                None => 0.0,
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = params.config.n_experts() as f64;
    let selected: Vec<f64> = layer_sparsity.iter().map(|s| (1.0 - s) * n).collect();
    let inputs: Vec<u8> = windows
        .iter()
        .flat_map(|(x, _)| x.iter().copied())
        .collect();
    Ok(EvalRecord {
        method: method.name().into(),
        setting,
        stage: manifest.stage.name().into(),
        checkpoint_sha256: checkpoint_hash(ckpt)?,
        eval_sha256: content_hash(&inputs),
        tokens,
        val_loss,
        perplexity: perplexity(val_loss),
        mean_sparsity: layer_sparsity.iter().sum::<f64>() / n_layers as f64,
        layer_sparsity,
        flops: flops_per_token(&params.config, &selected),
        threads: threads(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub sha256: String,
    pub record: EvalRecord,
}

/// Appends one JSON line; returns the record's content hash.
pub fn append_ledger(path: &Path, record: &EvalRecord) -> Result<String> {
    let sha256 = content_hash(serde_json::to_string(record)?.as_bytes());
    let line = serde_json::to_string(&LedgerEntry {
        sha256: sha256.clone(),
        record: record.clone(),
    })?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(sha256)
}

pub fn bench(cfg: &RunConfig, out: Option<&Path>) -> Result<BenchReport> {
    let report = run_bench(&cfg.bench_config(threads()))?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    if let Some(path) = out {
        fs::write(path, report.to_table())?;
    }
    Ok(report)
}

pub const REPORT_FILE: &str = "report.txt";
pub const SPARSITY_SVG: &str = "sparsity.svg";
pub const HISTOGRAM_SVG: &str = "histogram.svg";

/// Discrete-mode sparsity report at `cfg.tau` plus its two figures.
pub fn report(cfg: &RunConfig, ckpt: &Path, out: &Path) -> Result<SparsityReport> {
    cfg.validate()?;
    let corpus = load_corpus(cfg)?;
    let (params, manifest) = load_checkpoint(ckpt)?;
    if !params.is_moefied() || params.router_kind != RouterKind::Sigmoid {
        return Err(LteError::InvalidArgument(format!(
            "report needs a checkpoint with sigmoid routers, got {}",
            manifest.stage.name()
        )));
    }
    let seqs: Vec<Vec<u8>> = eval_windows(cfg, &corpus)?
        .into_iter()
        .map(|(x, _)| x)
        .collect();
    let rep = layer_sparsity_report(&params, &seqs, cfg.lte.tau)?;
    fs::create_dir_all(out)?;
    let mut text = format!(
        "stage = {}\ncheckpoint_sha256 = {}\n",
        manifest.stage.name(),
        checkpoint_hash(ckpt)?
    );
    text.push_str(&rep.to_text());
    fs::write(out.join(REPORT_FILE), text)?;
    fs::write(out.join(SPARSITY_SVG), sparsity_svg(&rep))?;
    fs::write(out.join(HISTOGRAM_SVG), histogram_svg(&rep))?;
    Ok(rep)
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub base: PathBuf,
    pub moefied: PathBuf,
    pub stage1: PathBuf,
    pub stage2: PathBuf,
    pub report: PathBuf,
    pub ledger: PathBuf,
    pub records: Vec<EvalRecord>,
}

/// train-base → moefy → stage 1 → stage 2 → eval → report under `cfg.out_dir`.
pub fn pipeline(cfg: &RunConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let root = &cfg.out_dir;
    let o = PipelineOutcome {
        base: root.join("base"),
        moefied: root.join("moefied"),
        stage1: root.join("stage1"),
        stage2: root.join("stage2"),
        report: root.join("report"),
        ledger: root.join(LEDGER_FILE),
        records: Vec::new(),
    };
    if o.ledger.exists() {
        fs::remove_file(&o.ledger)?;
    }
    train_base(cfg, &o.base)?;
    moefy(cfg, &o.base, &o.moefied)?;
    train_lte(cfg, &o.moefied, &o.stage1, LteStage::One)?;
    train_lte(cfg, &o.stage1, &o.stage2, LteStage::Two)?;
    let mut records = Vec::new();
    for (dir, method) in [
        (&o.base, EvalMethod::Dense),
        (&o.moefied, EvalMethod::Dense),
        (&o.stage1, EvalMethod::Lte),
        (&o.stage2, EvalMethod::Lte),
    ] {
        let r = eval(cfg, dir, method)?;
        append_ledger(&o.ledger, &r)?;
        log::info!(
            "{} on {}: ppl {:.4} sparsity {:.4}",
            r.method,
            r.stage,
            r.perplexity,
            r.mean_sparsity
        );
        records.push(r);
    }
    report(cfg, &o.stage2, &o.report)?;
    Ok(PipelineOutcome { records, ..o })
}
