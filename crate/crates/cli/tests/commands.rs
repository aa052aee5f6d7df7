use std::path::{Path, PathBuf};
use std::process::Command;

use lte_cli::commands::{self, EvalMethod, LteStage};
use lte_cli::RunConfig;
use lte_core::checkpoint;
use lte_core::model::TransformerParams;
use lte_core::numerics::Rng;
use lte_core::LteError;
use tempfile::TempDir;

const TINY: &str = "\
d_model = 16
n_heads = 2
n_layers = 2
d_ffn = 64
expert_size = 8
max_seq_len = 16
seq_len = 16
batch_size = 2
base_steps = 8
stage1_steps = 4
stage2_steps = 4
topk_steps = 4
eval_tokens = 256
seed = 5
";

fn setup() -> (TempDir, RunConfig) {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus.txt");
    commands::gen_corpus(&corpus, 20_000, 1).unwrap();
    let mut cfg = RunConfig::from_text(TINY).unwrap();
    cfg.corpus = corpus;
    cfg.out_dir = tmp.path().join("run");
    (tmp, cfg)
}

fn dir(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn base_and_moefied(cfg: &RunConfig) -> (PathBuf, PathBuf) {
    let (base, moe) = (dir(cfg, "base"), dir(cfg, "moefied"));
    commands::train_base(cfg, &base).unwrap();
    commands::moefy(cfg, &base, &moe).unwrap();
    (base, moe)
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn zero_step_base_is_the_seeded_init() {
    let (_tmp, mut cfg) = setup();
    cfg.base_steps = 0;
    let out = dir(&cfg, "base");
    assert!(commands::train_base(&cfg, &out).unwrap().is_empty());
    let (saved, _) = checkpoint::load::<f32>(&out).unwrap();
    let init = TransformerParams::<f32>::init(&cfg.model, &mut Rng::new(cfg.seed)).unwrap();
    assert_eq!(saved, init);
}

#[test]
fn same_seed_same_bytes() {
    let (_tmp, cfg) = setup();
    let (a, b) = (dir(&cfg, "a"), dir(&cfg, "b"));
    commands::train_base(&cfg, &a).unwrap();
    commands::train_base(&cfg, &b).unwrap();
    for f in [
        checkpoint::MANIFEST_FILE,
        checkpoint::WEIGHTS_FILE,
        commands::LOG_FILE,
    ] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
    let mut other = cfg.clone();
    other.seed += 1;
    let c = dir(&cfg, "c");
    commands::train_base(&other, &c).unwrap();
    assert_ne!(
        read(&a.join(checkpoint::WEIGHTS_FILE)),
        read(&c.join(checkpoint::WEIGHTS_FILE))
    );
}

#[test]
fn moefy_and_dense_baselines_preserve_the_function() {
    let (_tmp, cfg) = setup();
    let (base, moe) = base_and_moefied(&cfg);
    let d0 = commands::eval(&cfg, &base, EvalMethod::Dense).unwrap();
    let d1 = commands::eval(&cfg, &moe, EvalMethod::Dense).unwrap();
    assert!(
        (d0.val_loss - d1.val_loss).abs() <= 1e-5,
        "{} vs {}",
        d0.val_loss,
        d1.val_loss
    );
    assert_eq!(d0.mean_sparsity, 0.0);

    let mut keep_all = cfg.clone();
    keep_all.keep_fraction = 1.0;
    let dv = commands::eval(&keep_all, &moe, EvalMethod::Dejavu).unwrap();
    assert!((dv.val_loss - d1.val_loss).abs() <= 1e-5);

    for m in [EvalMethod::MoeficationGt, EvalMethod::RandomRouter] {
        let r = commands::eval(&cfg, &moe, m).unwrap();
        assert!(
            r.perplexity.is_finite() && (0.0..=1.0).contains(&r.mean_sparsity),
            "{m:?}"
        );
    }
    for (ckpt, m) in [
        (&base, EvalMethod::Lte),
        (&moe, EvalMethod::Lte),
        (&base, EvalMethod::RandomRouter),
    ] {
        assert!(
            matches!(
                commands::eval(&cfg, ckpt, m),
                Err(LteError::InvalidArgument(_))
            ),
            "{m:?}"
        );
    }
    assert!(commands::eval(&cfg, &moe, EvalMethod::NoisyTopk).is_err());
}

#[test]
fn stages_chain_and_misordering_is_rejected() {
    let (_tmp, cfg) = setup();
    let (base, moe) = base_and_moefied(&cfg);
    let (s1, s2) = (dir(&cfg, "stage1"), dir(&cfg, "stage2"));

    let order = |r: lte_core::Result<Vec<_>>| matches!(r, Err(LteError::StageOrder(_)));
    assert!(order(commands::train_lte(&cfg, &base, &s2, LteStage::Two)));
    assert!(order(commands::train_lte(&cfg, &base, &s1, LteStage::One)));
    assert!(order(commands::train_lte(&cfg, &moe, &s2, LteStage::Two)));
    assert!(matches!(
        commands::moefy(&cfg, &moe, &dir(&cfg, "x")),
        Err(LteError::StageOrder(_))
    ));

    assert_eq!(
        commands::train_lte(&cfg, &moe, &s1, LteStage::One)
            .unwrap()
            .len(),
        cfg.stage1_steps
    );
    assert_eq!(
        commands::train_lte(&cfg, &s1, &s2, LteStage::Two)
            .unwrap()
            .len(),
        cfg.stage2_steps
    );

    let a = commands::eval(&cfg, &s2, EvalMethod::Lte).unwrap();
    let b = commands::eval(&cfg, &s2, EvalMethod::Lte).unwrap();
    assert_eq!(a, b);

    let rep = commands::report(&cfg, &s2, &dir(&cfg, "report")).unwrap();
    assert!((rep.overall_sparsity - a.mean_sparsity).abs() <= 1e-9);
    for f in [
        commands::REPORT_FILE,
        commands::SPARSITY_SVG,
        commands::HISTOGRAM_SVG,
    ] {
        assert!(dir(&cfg, "report").join(f).is_file(), "{f}");
    }

    let topk = dir(&cfg, "topk");
    commands::train_topk(&cfg, &moe, &topk).unwrap();
    let r = commands::eval(&cfg, &topk, EvalMethod::NoisyTopk).unwrap();
    assert!(r.perplexity.is_finite());
}

#[test]
fn ledger_appends_hashed_records() {
    let (_tmp, cfg) = setup();
    let (base, _) = base_and_moefied(&cfg);
    let rec = commands::eval(&cfg, &base, EvalMethod::Dense).unwrap();
    let ledger = dir(&cfg, commands::LEDGER_FILE);
    let h1 = commands::append_ledger(&ledger, &rec).unwrap();
    let h2 = commands::append_ledger(&ledger, &rec).unwrap();
    assert_eq!(h1, h2);
    let text = std::fs::read_to_string(&ledger).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    let entry: commands::LedgerEntry = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(entry.record, rec);
}

#[test]
fn bench_has_one_row_per_shape_path_and_sparsity() {
    let (_tmp, mut cfg) = setup();
    cfg.set("bench_shapes", "32x128x1,32x128x4xswiglu").unwrap();
    cfg.bench_trials = 30;
    cfg.bench_warmups = 5;
    let rep = commands::bench(&cfg, None).unwrap();
    let grid = cfg.bench_config(1).sparsity_grid.len();
    assert_eq!(rep.rows.len(), 2 * 2 * grid);
}

// ---------------------------------------------------------------------------
// binary

fn lte(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_lte"))
        .args(args)
        .env("LTE_THREADS", "1")
        .output()
        .unwrap()
}

#[test]
fn binary_exit_codes() {
    let (tmp, cfg) = setup();
    let conf = tmp.path().join("run.conf");
    std::fs::write(
        &conf,
        format!(
            "{TINY}corpus = {}\nout_dir = {}\n",
            cfg.corpus.display(),
            cfg.out_dir.display()
        ),
    )
    .unwrap();
    let conf = conf.to_str().unwrap();

    let ok = lte(&["train-base", "--config", conf, "--base_steps", "2"]);
    assert!(
        ok.status.success(),
        "{}",
        String::from_utf8_lossy(&ok.stderr)
    );
    let log = std::fs::read_to_string(cfg.out_dir.join("base").join(commands::LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 2, "flag overrides the config file");

    let base = cfg.out_dir.join("base");
    let stage = lte(&[
        "train-lte",
        "--config",
        conf,
        "--checkpoint",
        base.to_str().unwrap(),
        "--stage",
        "2",
    ]);
    assert_eq!(stage.status.code(), Some(2));

    assert_eq!(
        lte(&["train-base", "--config", conf, "--lr_typo", "1"])
            .status
            .code(),
        Some(2)
    );
    let bad = tmp.path().join("bad.conf");
    std::fs::write(&bad, "nonsense_key = 1\n").unwrap();
    assert_eq!(
        lte(&["train-base", "--config", bad.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        lte(&["eval", "--checkpoint", "/nonexistent", "--method", "lte"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(lte(&["bogus"]).status.code(), Some(2));
}
