use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grouping::{apply_partition, ExpertPartition, GroupingMethod};
use crate::model::{Ffn, FfnKind, FfnLayer, FfnParams, GluFfnLayer};
use crate::numerics::{Activation, Rng, Tensor};

use super::{pack, sparse_ffn_forward};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchShape {
    pub d_model: usize,
    pub d_ffn: usize,
    /// 1 is the decode shape.
    pub tokens: usize,
    pub ffn_kind: FfnKind,
}

impl BenchShape {
    pub fn label(&self) -> String {
        format!(
            "d{}_f{}_t{}_{}",
            self.d_model,
            self.d_ffn,
            self.tokens,
            self.ffn_kind.name()
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchConfig {
    pub shapes: Vec<BenchShape>,
    /// Fractions of experts skipped, e.g. `[0.0, 0.25, 0.5, 0.75, 0.9]`.
    pub sparsity_grid: Vec<f64>,
    pub trials: usize,
    pub warmups: usize,
    pub threads: usize,
    pub expert_size: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let shape = |d_model, d_ffn, tokens| BenchShape {
            d_model,
            d_ffn,
            tokens,
            ffn_kind: FfnKind::TwoMatmul,
        };
        Self {
            shapes: vec![
                shape(512, 2048, 1),
                shape(1024, 4096, 1),
                shape(512, 2048, 16),
                shape(1024, 4096, 16),
            ],
            sparsity_grid: vec![0.0, 0.25, 0.5, 0.75, 0.9],
            trials: 30,
            warmups: 5,
            threads: 1,
            expert_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchPath {
    Dense,
    Sparse,
}

impl BenchPath {
    pub fn name(self) -> &'static str {
        match self {
            BenchPath::Dense => "dense",
            BenchPath::Sparse => "sparse",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub shape: BenchShape,
    pub path: BenchPath,
    pub sparsity: f64,
    pub median_ns: f64,
    pub iqr_ns: f64,
    pub threads: usize,
    pub trials: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub warnings: Vec<String>,
}

pub const BENCH_HEADER: &str = "shape,path,sparsity,median_ns,iqr_ns,threads,trials";

impl BenchReport {
    pub fn to_table(&self) -> String {
        let mut s = String::from(BENCH_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.4},{:.0},{:.0},{},{}",
                r.shape.label(),
                r.path.name(),
                r.sparsity,
                r.median_ns,
                r.iqr_ns,
                r.threads,
                r.trials
            );
        }
        s
    }

    pub fn median(&self, shape: &BenchShape, path: BenchPath, sparsity: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.shape == *shape && r.path == path && (r.sparsity - sparsity).abs() < 1e-9)
            .map(|r| r.median_ns)
    }
}

fn bench_layer(shape: &BenchShape, expert_size: usize, rng: &mut Rng) -> Result<Ffn<f32>> {
    let (d, f) = (shape.d_model, shape.d_ffn);
    let std = 1.0 / (d as f64).sqrt();
    let params = match shape.ffn_kind {
        FfnKind::TwoMatmul => FfnParams::TwoMatmul(FfnLayer {
            w1: rng.normal_tensor(&[d, f], std),
            b1: rng.normal_tensor(&[f], 0.1),
            w2: rng.normal_tensor(&[f, d], std),
            b2: rng.normal_tensor(&[d], 0.1),
            activation: Activation::GeluTanh,
        }),
        FfnKind::Swiglu => FfnParams::Glu(GluFfnLayer {
            w_gate: rng.normal_tensor(&[d, f], std),
            w_up: rng.normal_tensor(&[d, f], std),
            w_down: rng.normal_tensor(&[f, d], std),
        }),
    };
    if f % expert_size != 0 {
        return Err(invalid!(
            "bench d_ffn {f} not divisible by expert_size {expert_size}"
        ));
    }
    let n = f / expert_size;
    let identity = ExpertPartition::from_assignment(
        0,
        (0..f).map(|i| i / expert_size).collect(),
        n,
        GroupingMethod::Random,
    )?;
    apply_partition(&Ffn::dense(params), &identity)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn median_iqr(mut v: Vec<f64>) -> (f64, f64) {
    v.sort_by(f64::total_cmp);
    (quantile(&v, 0.5), quantile(&v, 0.75) - quantile(&v, 0.25))
}

fn timer_resolution_ns() -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..1000 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min((b - a).as_nanos() as f64);
    }
    best
}

/// Wall-time of one FFN call on the dense path and on the packed sparse path
/// at every sparsity of the grid. Dense and sparse trials are interleaved so
/// both see the same machine state.
pub fn bench(config: &BenchConfig) -> Result<BenchReport> {
    if config.trials < 30 || config.warmups < 5 {
        return Err(invalid!("bench needs trials >= 30 and warmups >= 5"));
    }
    if config.sparsity_grid.iter().any(|s| !(0.0..1.0).contains(s)) {
        return Err(invalid!("sparsities must lie in [0, 1)"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads.max(1))
        .build()
        .map_err(|e| invalid!("thread pool: {e}"))?;
    pool.install(|| run(config))
}

fn run(config: &BenchConfig) -> Result<BenchReport> {
    let mut report = BenchReport::default();
    let resolution = timer_resolution_ns();
    let mut rng = Rng::new(config.seed);
    for shape in &config.shapes {
        let layer = bench_layer(shape, config.expert_size, &mut rng)?;
        let packed = pack(&layer)?;
        let n = packed.n_experts;
        let x: Tensor<f32> = rng.normal_tensor(&[shape.tokens, shape.d_model], 1.0);
        for &sparsity in &config.sparsity_grid {
            let keep = ((1.0 - sparsity) * n as f64).round() as usize;
            let mut selection = || -> Vec<Vec<usize>> {
                (0..shape.tokens)
                    .map(|_| {
                        let mut s = rng.sample_distinct(n, keep);
                        s.sort_unstable();
                        s
                    })
                    .collect()
            };
            let mut dense_ns = Vec::with_capacity(config.trials);
            let mut sparse_ns = Vec::with_capacity(config.trials);
            for i in 0..config.warmups + config.trials {
                let sel = selection();
                let t0 = Instant::now();
                black_box(layer.forward(black_box(&x))?);
                let t1 = Instant::now();
                black_box(sparse_ffn_forward(&packed, black_box(&sel), black_box(&x))?);
                let t2 = Instant::now();
                if i >= config.warmups {
                    dense_ns.push((t1 - t0).as_nanos() as f64);
                    sparse_ns.push((t2 - t1).as_nanos() as f64);
                }
            }
            for (path, samples) in [(BenchPath::Dense, dense_ns), (BenchPath::Sparse, sparse_ns)] {
                let (median_ns, iqr_ns) = median_iqr(samples);
                if median_ns < 100.0 * resolution {
                    report.warnings.push(format!(
                        "{} {} at sparsity {sparsity}: median {median_ns:.0} ns is within 100x of timer resolution {resolution:.0} ns",
                        shape.label(),
                        path.name()
                    ));
                }
                report.rows.push(BenchRow {
                    shape: *shape,
                    path,
                    sparsity,
                    median_ns,
                    iqr_ns,
                    threads: config.threads.max(1),
                    trials: config.trials,
                });
            }
        }
    }
    Ok(report)
}
