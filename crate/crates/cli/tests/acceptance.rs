//! Acceptance suite. One test per criterion; each prints a single
//! `[PASS]`/`[FAIL]` line straight to stdout (bypassing capture) and then
//! asserts. Training-based criteria share one dense base model, trained once.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::Path;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use lte_cli::commands;
use lte_cli::RunConfig;
use lte_core::analysis::{routing_trace, LayerRouting};
use lte_core::corpus::{synthetic_text, Corpus};
use lte_core::grouping::{
    apply_partition, group_experts_kmeans_traced, group_experts_random, moefy, within_cluster_sse,
    ExpertPartition, GroupingMethod,
};
use lte_core::losses::{task_loss, LteHyperparams};
use lte_core::model::{
    forward_lm, Ffn, FfnKind, FfnLayer, FfnMode, FfnParams, GluFfnLayer, ModelConfig,
    MoeAttachment, TransformerParams,
};
use lte_core::numerics::{Activation, Real, Rng, Tensor};
use lte_core::routing::RouterLayer;
use lte_core::sparse_exec::{
    bench, flops_per_token, pack, sparse_ffn_forward, BenchConfig, BenchPath, BenchShape,
};
use lte_core::training::{
    build_lm_graph, run_base, run_stage1, run_stage2, OptimConfig, TrainConfig, TrainMode,
};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(id: u32, name: &str, ok: bool, detail: &str) {
    let tag = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stdout().lock(),
        "[{tag}] criterion {id:>2}: {name} | {detail}"
    );
    assert!(ok, "criterion {id} ({name}) failed: {detail}");
}

// ---------------------------------------------------------------------------
// shared desk-scale setup

const SEQ: usize = 64;
const BATCH: usize = 8;
const TAU: f64 = 0.5;
const BASE_STEPS: usize = 400;
const STAGE1_STEPS: usize = 200;
const STAGE2_STEPS: usize = 201;
const EVAL_TOKENS: usize = 4096;

fn desk_model() -> ModelConfig {
    ModelConfig {
        vocab_size: 256,
        d_model: 64,
        n_heads: 4,
        n_layers: 2,
        d_ffn: 256,
        max_seq_len: SEQ,
        ffn_kind: FfnKind::TwoMatmul,
        activation: Activation::GeluTanh,
        expert_size: 16,
        tie_embeddings: false,
    }
}

fn train_config(steps: usize, lr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: BATCH,
        seq_len: SEQ,
        optim: OptimConfig {
            lr,
            ..Default::default()
        },
        seed,
    }
}

struct Shared {
    corpus: Corpus,
    moefied: TransformerParams<f32>,
    /// Validation windows as (inputs, targets).
    eval: Vec<(Vec<u8>, Vec<u8>)>,
}

/// ~1 MB corpus, dense base model, K-means MoEfication.
fn shared() -> &'static Shared {
    static S: OnceLock<Shared> = OnceLock::new();
    S.get_or_init(|| {
        let corpus = Corpus::from_bytes(synthetic_text(1_000_000, 0).into_bytes()).unwrap();
        let init = TransformerParams::<f32>::init(&desk_model(), &mut Rng::new(0)).unwrap();
        let (base, _) = run_base(init, &corpus, train_config(BASE_STEPS, 3e-3, 0)).unwrap();
        let moefied = moefy(&base, GroupingMethod::Kmeans, 16, &mut Rng::new(1)).unwrap();
        let eval = corpus.val_batches(1, SEQ, EVAL_TOKENS).unwrap();
        Shared {
            corpus,
            moefied,
            eval,
        }
    })
}

/// Stage-1 results keyed by (η, λ, seed), computed at most once each.
fn stage1(eta: f64, lambda: f64, seed: u64) -> TransformerParams<f32> {
    static CACHE: Mutex<BTreeMap<(u64, u64, u64), TransformerParams<f32>>> =
        Mutex::new(BTreeMap::new());
    let key = (eta.to_bits(), lambda.to_bits(), seed);
    if let Some(p) = CACHE.lock().unwrap().get(&key) {
        return p.clone();
    }
    let s = shared();
    let lte = LteHyperparams {
        eta,
        lambda,
        tau: TAU,
        ..Default::default()
    };
    let (p, _) = run_stage1(
        s.moefied.clone(),
        &s.corpus,
        train_config(STAGE1_STEPS, 1e-3, seed),
        lte,
    )
    .unwrap();
    CACHE.lock().unwrap().insert(key, p.clone());
    p
}

fn eval_inputs() -> Vec<Vec<u8>> {
    shared().eval.iter().map(|(x, _)| x.clone()).collect()
}

/// Soft-mode scores of every layer on the evaluation windows.
fn scores(p: &TransformerParams<f32>) -> Vec<LayerRouting> {
    routing_trace(p, &eval_inputs(), FfnMode::MoeSoft).unwrap()
}

/// Fraction of all scores (all layers) at or below τ.
fn monitored_sparsity(p: &TransformerParams<f32>) -> f64 {
    let trace = scores(p);
    let (below, total) = trace.iter().fold((0, 0), |(b, t), l| {
        (
            b + l.scores.iter().filter(|&&s| s <= TAU).count(),
            t + l.scores.len(),
        )
    });
    below as f64 / total as f64
}

fn band_fraction(p: &TransformerParams<f32>, lo: f64, hi: f64) -> f64 {
    let trace = scores(p);
    let (inside, total) = trace.iter().fold((0, 0), |(b, t), l| {
        (
            b + l.scores.iter().filter(|&&s| s > lo && s < hi).count(),
            t + l.scores.len(),
        )
    });
    inside as f64 / total as f64
}

fn eval_perplexity(p: &TransformerParams<f32>, mode: FfnMode) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (x, y) in &shared().eval {
        let out = forward_lm(p, x, mode).unwrap();
        sum += task_loss(&out.logits, y).unwrap() * y.len() as f64;
        n += y.len();
    }
    (sum / n as f64).exp()
}

// ---------------------------------------------------------------------------
// 1. sparse/dense equivalence

fn random_layer<T: Real>(
    kind: FfnKind,
    d: usize,
    f: usize,
    es: usize,
    rng: &mut Rng,
) -> (Ffn<T>, ExpertPartition) {
    let std = 1.0 / (d as f64).sqrt();
    let params = match kind {
        FfnKind::TwoMatmul => FfnParams::TwoMatmul(FfnLayer {
            w1: rng.normal_tensor(&[d, f], std),
            b1: rng.normal_tensor(&[f], 0.5),
            w2: rng.normal_tensor(&[f, d], std),
            b2: rng.normal_tensor(&[d], 0.5),
            activation: Activation::GeluTanh,
        }),
        FfnKind::Swiglu => FfnParams::Glu(GluFfnLayer {
            w_gate: rng.normal_tensor(&[d, f], std),
            w_up: rng.normal_tensor(&[d, f], std),
            w_down: rng.normal_tensor(&[f, d], std),
        }),
    };
    let part = group_experts_random(f, f / es, rng).unwrap();
    (apply_partition(&Ffn::dense(params), &part).unwrap(), part)
}

/// Dense FFN over all neurons with unselected experts' contributions masked
/// out, in f64 scalar loops over the permuted weights.
fn dense_mask_oracle<T: Real>(
    layer: &Ffn<T>,
    es: usize,
    sel: &[Vec<usize>],
    x: &Tensor<T>,
) -> Vec<f64> {
    let g = |t: &Tensor<T>, r: usize, c: usize| t.at(r, c).to_f64().unwrap();
    let (d, f) = (layer.d_model(), layer.d_ffn());
    let mut out = vec![0.0; x.rows() * d];
    for t in 0..x.rows() {
        let xi: Vec<f64> = x.row(t).iter().map(|v| v.to_f64().unwrap()).collect();
        let row = &mut out[t * d..(t + 1) * d];
        if let FfnParams::TwoMatmul(l) = &layer.params {
            for (j, o) in row.iter_mut().enumerate() {
                *o = l.b2.data()[j].to_f64().unwrap();
            }
        }
        for n in 0..f {
            if !sel[t].contains(&(n / es)) {
                continue;
            }
            let (h, down) = match &layer.params {
                FfnParams::TwoMatmul(l) => {
                    let pre: f64 = (0..d).map(|k| xi[k] * g(&l.w1, k, n)).sum::<f64>()
                        + l.b1.data()[n].to_f64().unwrap();
                    let c = (2.0 / std::f64::consts::PI).sqrt();
                    (
                        0.5 * pre * (1.0 + (c * (pre + 0.044715 * pre.powi(3))).tanh()),
                        &l.w2,
                    )
                }
                FfnParams::Glu(l) => {
                    let a: f64 = (0..d).map(|k| xi[k] * g(&l.w_gate, k, n)).sum();
                    let b: f64 = (0..d).map(|k| xi[k] * g(&l.w_up, k, n)).sum();
                    (a / (1.0 + (-a).exp()) * b, &l.w_down)
                }
            };
            for (j, o) in row.iter_mut().enumerate() {
                *o += h * g(down, n, j);
            }
        }
    }
    out
}

fn equivalence_trials<T: Real>(kind: FfnKind, trials: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let es = [4, 8, 16][rng.below(3)];
        let d = 8 * (1 + rng.below(8));
        let f = es * (2 + rng.below(12));
        let n = f / es;
        let (layer, _) = random_layer::<T>(kind, d, f, es, &mut rng);
        let packed = pack(&layer).unwrap();
        let tokens = 1 + rng.below(6);
        let x: Tensor<T> = rng.normal_tensor(&[tokens, d], 1.0);
        let sel: Vec<Vec<usize>> = (0..tokens)
            .map(|_| {
                let k = rng.below(n + 1);
                let mut s = rng.sample_distinct(n, k);
                s.sort_unstable();
                s
            })
            .collect();
        let got = sparse_ffn_forward(&packed, &sel, &x).unwrap();
        let want = dense_mask_oracle(&layer, es, &sel, &x);
        for (a, b) in got.data().iter().zip(&want) {
            worst = worst.max((a.to_f64().unwrap() - b).abs());
        }
    }
    worst
}

#[test]
fn criterion_01_sparse_dense_equivalence() {
    let _g = serial();
    let t = Instant::now();
    let mut errs = Vec::new();
    for kind in [FfnKind::TwoMatmul, FfnKind::Swiglu] {
        errs.push((kind, "f32", equivalence_trials::<f32>(kind, 100, 11), 1e-5));
        errs.push((kind, "f64", equivalence_trials::<f64>(kind, 100, 12), 1e-10));
    }
    let ok = errs.iter().all(|(_, _, e, tol)| e <= tol) && t.elapsed().as_secs() < 60;
    let detail = errs
        .iter()
        .map(|(k, p, e, _)| format!("{} {p} {e:.2e}", k.name()))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        1,
        "sparse path equals dense-mask oracle",
        ok,
        &format!("max abs err: {detail}; {:.1?}", t.elapsed()),
    );
}

// ---------------------------------------------------------------------------
// 2. gradient fidelity

/// Central differences assume the loss is smooth within ±h. The guard in
/// the separability term has a kink at |G − τ| = √ε and a steep 1/d² nearby,
/// so routers are redrawn until every score on `x` is at least
/// `MIN_TAU_DISTANCE` from τ.
const MIN_TAU_DISTANCE: f64 = 0.1;

fn toy_model(kind: FfnKind, seed: u64, x: &[u8]) -> (TransformerParams<f64>, usize) {
    let c = ModelConfig {
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
    };
    let mut rng = Rng::new(seed);
    let mut p = TransformerParams::<f64>::init(&c, &mut rng).unwrap();
    // O(1) weights everywhere so every term has a resolvable gradient
    for (_, t) in p.named_tensors_mut() {
        let shape = t.shape().to_vec();
        *t = rng.normal_tensor(&shape, 0.3);
    }
    for b in &mut p.blocks {
        let part = group_experts_random(16, 4, &mut rng).unwrap();
        b.ffn = apply_partition(&b.ffn, &part).unwrap();
        let router = RouterLayer::init(8, 4, &mut rng);
        b.moe = Some(MoeAttachment {
            partition: part,
            router,
        });
    }
    let seqs: Vec<Vec<u8>> = x.chunks(8).map(<[u8]>::to_vec).collect();
    for draw in 1.. {
        for b in &mut p.blocks {
            let m = b.moe.as_mut().unwrap();
            m.router.wg = rng.normal_tensor(&[8, 4], 1.0);
            m.router.bias = Some(rng.normal_tensor(&[4], 1.0));
        }
        let trace = routing_trace(&p, &seqs, FfnMode::MoeSoft).unwrap();
        if trace
            .iter()
            .flat_map(|l| &l.scores)
            .all(|g| (g - TAU).abs() >= MIN_TAU_DISTANCE)
        {
            return (p, draw);
        }
    }
    unreachable!()
}

/// Worst relative error over all parameters between the tape gradient and
/// central differences with step `h`. Differences below the FD roundoff
/// floor `10·ε·|L|/h` are not resolvable and count as agreement.
fn gradient_error(
    p: &TransformerParams<f64>,
    x: &[u8],
    y: &[u8],
    lte: &LteHyperparams,
    h: f64,
) -> (f64, String) {
    let loss = |q: &TransformerParams<f64>| {
        build_lm_graph(q, x, y, 2, TrainMode::Soft, Some(lte), None)
            .unwrap()
            .breakdown
            .total
    };
    let lg = build_lm_graph(p, x, y, 2, TrainMode::Soft, Some(lte), None).unwrap();
    let l0 = lg.breakdown.total;
    let floor = 10.0 * f64::EPSILON * l0.abs().max(1.0) / h;
    let grads = lg.gradients().unwrap();
    let mut worst = (0.0, String::new());
    for (name, g) in &grads.grads {
        for i in 0..g.len() {
            let bump = |delta: f64| {
                let mut q = p.clone();
                for (n, t) in q.named_tensors_mut() {
                    if &n == name {
                        t.data_mut()[i] += delta;
                    }
                }
                loss(&q)
            };
            let num = (bump(h) - bump(-h)) / (2.0 * h);
            let a = g.data()[i];
            let diff = (a - num).abs();
            let rel = if diff <= floor {
                0.0
            } else {
                diff / a.abs().max(num.abs())
            };
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}]"));
            }
        }
    }
    worst
}

#[test]
fn criterion_02_gradient_fidelity() {
    let _g = serial();
    let t = Instant::now();
    let lte = LteHyperparams::default();
    assert_eq!(lte.lambda, 0.5);
    let mut worst = (0.0f64, String::new());
    let (mut n_params, mut max_draws) = (0, 0);
    for kind in [FfnKind::TwoMatmul, FfnKind::Swiglu] {
        for seed in 0..5 {
            let mut rng = Rng::new(100 + seed);
            let x: Vec<u8> = (0..16).map(|_| rng.below(16) as u8).collect();
            let y: Vec<u8> = (0..16).map(|_| rng.below(16) as u8).collect();
            let (p, draws) = toy_model(kind, seed, &x);
            max_draws = max_draws.max(draws);
            n_params = n_params.max(p.element_count());
            let b = build_lm_graph(&p, &x, &y, 2, TrainMode::Soft, Some(&lte), None)
                .unwrap()
                .breakdown;
            assert!(b.efficiency > 0.0 && b.separability > 0.0);
            for h in [1e-4, 1e-5] {
                let (e, at) = gradient_error(&p, &x, &y, &lte, h);
                if e > worst.0 {
                    worst = (e, format!("{} seed {seed} h {h:e} at {at}", kind.name()));
                }
            }
        }
    }
    let ok = worst.0 <= 1e-4 && n_params <= 5000 && t.elapsed().as_secs() < 300;
    verdict(
        2,
        "stage-1 loss gradients match central differences",
        ok,
        &format!("{n_params} params, 5 seeds x 2 kinds, router draws <= {max_draws}, worst rel err {:.2e} ({}); {:.1?}", worst.0, worst.1, t.elapsed()),
    );
}

// ---------------------------------------------------------------------------
// 3. balanced clustering

#[test]
fn criterion_03_balanced_clustering() {
    let _g = serial();
    let s = shared();
    let mut ok = true;
    let mut details = Vec::new();
    for trial in 0..5u64 {
        // neuron features of the trained base layers (alternating layers)
        let layer = &s.moefied.blocks[(trial % 2) as usize].ffn;
        let features = layer.neuron_features();
        let n = 16;
        let trace = group_experts_kmeans_traced(&features, n, &mut Rng::new(trial), 50).unwrap();
        let balanced = trace
            .partition
            .sizes()
            .iter()
            .all(|&c| c == features.rows() / n);
        let monotone = trace.sse_history.windows(2).all(|w| w[1] <= w[0]);
        let km = within_cluster_sse(&features, &trace.partition).unwrap();
        let rnd = within_cluster_sse(
            &features,
            &group_experts_random(features.rows(), n, &mut Rng::new(trial)).unwrap(),
        )
        .unwrap();
        ok &= balanced && monotone && km <= rnd;
        details.push(format!("{km:.3}<={rnd:.3}"));
    }
    verdict(
        3,
        "balanced k-means: equal sizes, monotone SSE, beats random",
        ok,
        &format!("sse kmeans<=random: {}", details.join(" ")),
    );
}

// ---------------------------------------------------------------------------
// 4. η–sparsity monotonicity

#[test]
fn criterion_04_eta_sparsity_monotonicity() {
    let _g = serial();
    let t = Instant::now();
    let sp: Vec<f64> = [0.1, 1.0, 10.0]
        .iter()
        .map(|&eta| monotonic_point(eta))
        .collect();
    let ok = sp.windows(2).all(|w| w[1] - w[0] >= 0.02) && t.elapsed().as_secs() < 1800;
    verdict(
        4,
        "final monitored sparsity strictly increasing in eta (margin 0.02)",
        ok,
        &format!(
            "eta 0.1/1/10 -> {:.4}/{:.4}/{:.4}; {:.1?}",
            sp[0],
            sp[1],
            sp[2],
            t.elapsed()
        ),
    );
}

fn monotonic_point(eta: f64) -> f64 {
    monitored_sparsity(&stage1(eta, 0.5, 0))
}

// ---------------------------------------------------------------------------
// 5. separability

#[test]
fn criterion_05_separability() {
    let _g = serial();
    let t = Instant::now();
    let eta = 0.1;
    let with = band_fraction(&stage1(eta, 0.5, 0), 0.4, 0.6);
    let without = band_fraction(&stage1(eta, 0.0, 0), 0.4, 0.6);
    let ok = with < without && 2.0 * with <= without && t.elapsed().as_secs() < 1200;
    verdict(
        5,
        "separability loss halves score mass in (0.4, 0.6)",
        ok,
        &format!(
            "eta {eta}: lambda 0.5 -> {with:.4}, lambda 0 -> {without:.4}; {:.1?}",
            t.elapsed()
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. router FLOPs share

#[test]
fn criterion_06_router_flops_share() {
    let _g = serial();
    let mut c = ModelConfig::desk(FfnKind::Swiglu);
    c.expert_size = 32;
    c.validate().unwrap();
    let r = flops_per_token(&c, &[]);
    let exact = 1.0 / 96.0;
    let mut two = ModelConfig::desk(FfnKind::TwoMatmul);
    two.expert_size = 32;
    let r2 = flops_per_token(&two, &[]);
    // "approximately 1% of the total FLOPs of FFN layers"
    let ok = (r.router_share - exact).abs() <= 1e-6
        && (r2.router_share - 1.0 / 64.0).abs() <= 1e-6
        && (0.005..0.015).contains(&r.router_share);
    verdict(
        6,
        "router FLOPs share = 1/96 for swiglu, expert_size 32",
        ok,
        &format!(
            "share {:.6} ({:.3}%), two_matmul {:.6}",
            r.router_share,
            100.0 * r.router_share,
            r2.router_share
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. kernel latency direction

#[test]
fn criterion_07_kernel_latency_direction() {
    let _g = serial();
    let t = Instant::now();
    let shape = BenchShape {
        d_model: 1024,
        d_ffn: 4096,
        tokens: 1,
        ffn_kind: FfnKind::TwoMatmul,
    };
    let grid = vec![0.0, 0.25, 0.5, 0.75, 0.9];
    let cfg = BenchConfig {
        shapes: vec![shape],
        sparsity_grid: grid.clone(),
        trials: 51,
        warmups: 5,
        threads: 1,
        expert_size: 32,
        seed: 0,
    };
    let rep = bench(&cfg).unwrap();
    let sparse: Vec<f64> = grid
        .iter()
        .map(|&s| rep.median(&shape, BenchPath::Sparse, s).unwrap())
        .collect();
    let dense = rep.median(&shape, BenchPath::Dense, 0.5).unwrap();
    let ratio = sparse[2] / dense;
    let ok =
        sparse.windows(2).all(|w| w[1] <= w[0]) && ratio <= 0.85 && t.elapsed().as_secs() < 300;
    let ms: Vec<String> = sparse.iter().map(|v| format!("{:.3}", v / 1e6)).collect();
    verdict(
        7,
        "sparse latency non-increasing in sparsity, <= 0.85x dense at 50%",
        ok,
        &format!(
            "sparse ms {} | dense {:.3} ms | ratio@50% {ratio:.3}; {:.1?}",
            ms.join("/"),
            dense / 1e6,
            t.elapsed()
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. union-sparsity monotonicity

#[test]
fn criterion_08_union_sparsity_monotonicity() {
    let _g = serial();
    const T: usize = 1000;
    let windows = T.div_ceil(SEQ);
    let mut ok = true;
    let (mut checked, mut drops) = (0usize, 0usize);
    let mut ends = Vec::new();
    for lambda in [0.5, 0.0] {
        let p = stage1(0.1, lambda, 0);
        for batch in eval_inputs().chunks(windows).filter(|c| c.len() == windows) {
            let trace = routing_trace(&p, batch, FfnMode::MoeDiscrete { tau: TAU }).unwrap();
            for full in &trace {
                let n = full.n_experts;
                let l = LayerRouting {
                    n_experts: n,
                    scores: full.scores[..T * n].to_vec(),
                    mask: full.mask[..T * n].to_vec(),
                };
                let curve = l.union_prefix_curve();
                // set-theoretic recount of every prefix from scratch
                let mut union = BTreeSet::new();
                for m in 1..=T {
                    union.clear();
                    for i in 0..m {
                        union.extend((0..n).filter(|&e| l.mask_row(i)[e]));
                    }
                    ok &= curve[m - 1] == 1.0 - union.len() as f64 / n as f64;
                }
                ok &= curve.len() == T && curve.windows(2).all(|w| w[1] <= w[0]);
                drops += curve.windows(2).filter(|w| w[1] < w[0]).count();
                checked += 1;
                ends.push(format!("{:.3}->{:.3}", curve[0], curve[T - 1]));
            }
        }
    }
    verdict(
        8,
        "union sparsity non-increasing over token prefixes",
        ok,
        &format!(
            "{checked} layer-batches of {T} tokens exact, {drops} strict drops; first->last {}",
            ends.join(" ")
        ),
    );
}

// ---------------------------------------------------------------------------
// 9. stage-2 contracts

fn router_bits(p: &TransformerParams<f32>) -> Vec<(String, Vec<u32>)> {
    p.router_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn criterion_09_stage2_contracts() {
    let _g = serial();
    let s = shared();
    let lte = LteHyperparams {
        eta: 0.1,
        lambda: 0.5,
        tau: TAU,
        ..Default::default()
    };
    let mut frozen_all = true;
    let (mut loss_wins, mut ppl_wins) = (0, 0);
    let mut details = Vec::new();
    for seed in 0..3u64 {
        let s1 = stage1(lte.eta, lte.lambda, seed);
        let (s2, log) = run_stage2(
            s1.clone(),
            &s.corpus,
            train_config(STAGE2_STEPS, 1e-3, seed),
            lte,
        )
        .unwrap();
        frozen_all &= router_bits(&s1) == router_bits(&s2);
        let loss_ok = log[200].l_task < log[0].l_task;
        let before = eval_perplexity(&s1, FfnMode::MoeDiscrete { tau: TAU });
        let after = eval_perplexity(&s2, FfnMode::MoeDiscrete { tau: TAU });
        loss_wins += loss_ok as usize;
        ppl_wins += (after < before) as usize;
        details.push(format!(
            "seed {seed}: loss {:.3}->{:.3}, ppl {before:.3}->{after:.3}",
            log[0].l_task, log[200].l_task
        ));
    }
    let ok = frozen_all && loss_wins >= 2 && ppl_wins >= 2;
    verdict(
        9,
        "stage 2: frozen routers, loss falls, discrete ppl improves (2 of 3 seeds)",
        ok,
        &format!("routers bit-identical {frozen_all}; {}", details.join("; ")),
    );
}

// ---------------------------------------------------------------------------
// 10. pipeline determinism

fn files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_10_pipeline_determinism() {
    let _g = serial();
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus.txt");
    commands::gen_corpus(&corpus, 100_000, 3).unwrap();
    let run = |name: &str| {
        let mut c = RunConfig::from_text(
            "d_model = 32\nn_heads = 2\nn_layers = 2\nd_ffn = 128\nexpert_size = 16\nmax_seq_len = 32\n\
             seq_len = 32\nbatch_size = 4\nbase_steps = 30\nstage1_steps = 20\nstage2_steps = 20\n\
             eval_tokens = 1024\ncheckpoint_every = 10\nseed = 9\n",
        )
        .unwrap();
        c.corpus = corpus.clone();
        c.out_dir = tmp.path().join(name);
        commands::pipeline(&c).unwrap();
        files(&c.out_dir)
    };
    let (a, b) = (run("a"), run("b"));
    let differing: Vec<&String> = a.keys().filter(|k| b.get(*k) != a.get(*k)).collect();
    let ok = !a.is_empty() && a.keys().eq(b.keys()) && differing.is_empty();
    verdict(
        10,
        "pipeline reruns are byte-identical",
        ok,
        &format!(
            "{} files compared, {} differ, threads {}",
            a.len(),
            differing.len(),
            commands::threads()
        ),
    );
}
