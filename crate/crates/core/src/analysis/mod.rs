//! Post-hoc routing measurements: per-layer sparsity, union sparsity as the
//! batch grows, score histograms, and allocation concentration.

mod plot;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{forward_lm, FfnMode, TransformerParams};
use crate::numerics::Real;
use crate::routing::RoutingDecision;

pub use plot::{bar_chart_svg, histogram_svg, sparsity_svg};

pub const HISTOGRAM_BINS: usize = 64;
/// Half-width of the score band around τ counted as "near the threshold".
pub const NEAR_TAU_BAND: f64 = 0.1;

/// Routing of every evaluated token in one layer, in evaluation order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRouting {
    pub n_experts: usize,
    /// Row-major `tokens × n_experts`.
    pub scores: Vec<f64>,
    pub mask: Vec<bool>,
}

impl LayerRouting {
    pub fn from_decisions<T: Real>(decisions: &[&RoutingDecision<T>]) -> Result<Self> {
        let n = decisions
            .first()
            .map(|d| d.n_experts())
            .ok_or_else(|| invalid!("no decisions"))?;
        let mut out = Self {
            n_experts: n,
            scores: Vec::new(),
            mask: Vec::new(),
        };
        for d in decisions {
            if d.n_experts() != n {
                return Err(invalid!("decisions over {} and {n} experts", d.n_experts()));
            }
            out.scores.extend(
                d.scores
                    .data()
                    .iter()
                    .map(|s| s.to_f64().unwrap_or(f64::NAN)),
            );
            out.mask.extend_from_slice(&d.mask);
        }
        Ok(out)
    }

    pub fn tokens(&self) -> usize {
        self.mask.len() / self.n_experts.max(1)
    }

    pub fn mask_row(&self, t: usize) -> &[bool] {
        &self.mask[t * self.n_experts..(t + 1) * self.n_experts]
    }

    pub fn token_sparsity(&self, t: usize) -> f64 {
        let k = self.mask_row(t).iter().filter(|&&m| m).count();
        1.0 - k as f64 / self.n_experts as f64
    }

    /// Mean over tokens of `1 − selected/N`.
    pub fn sparsity(&self) -> f64 {
        let t = self.tokens();
        (0..t).map(|i| self.token_sparsity(i)).sum::<f64>() / t as f64
    }

    /// `1 − |∪ selected|/N` over tokens `range`.
    pub fn union_sparsity(&self, range: std::ops::Range<usize>) -> f64 {
        let mut any = vec![false; self.n_experts];
        for t in range {
            for (a, &m) in any.iter_mut().zip(self.mask_row(t)) {
                *a |= m;
            }
        }
        1.0 - any.iter().filter(|&&a| a).count() as f64 / self.n_experts as f64
    }

    /// Union sparsity of every prefix `tokens[0..m]`, `m = 1..=T`, computed
    /// incrementally.
    pub fn union_prefix_curve(&self) -> Vec<f64> {
        let mut any = vec![false; self.n_experts];
        let mut count = 0;
        (0..self.tokens())
            .map(|t| {
                for (a, &m) in any.iter_mut().zip(self.mask_row(t)) {
                    if m && !*a {
                        *a = true;
                        count += 1;
                    }
                }
                1.0 - count as f64 / self.n_experts as f64
            })
            .collect()
    }

    /// Mean union sparsity over consecutive disjoint groups of `size` tokens.
    /// A trailing partial group is dropped.
    pub fn union_by_group(&self, size: usize) -> Option<f64> {
        let groups = self.tokens() / size.max(1);
        (size > 0 && groups > 0).then(|| {
            (0..groups)
                .map(|g| self.union_sparsity(g * size..(g + 1) * size))
                .sum::<f64>()
                / groups as f64
        })
    }

    /// `HISTOGRAM_BINS` equal bins over [0, 1]; bin `i` holds scores in
    /// `[i/64, (i+1)/64)`, with 1.0 in the last bin.
    pub fn histogram(&self) -> Vec<u64> {
        let mut h = vec![0u64; HISTOGRAM_BINS];
        for &s in &self.scores {
            let b = ((s.clamp(0.0, 1.0) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            h[b] += 1;
        }
        h
    }

    /// Fraction of scores strictly inside `(lo, hi)`.
    pub fn fraction_in(&self, lo: f64, hi: f64) -> f64 {
        let n = self.scores.iter().filter(|&&s| s > lo && s < hi).count();
        n as f64 / self.scores.len() as f64
    }

    pub fn concentration(&self) -> Concentration {
        let t = self.tokens() as f64;
        let mut mean = vec![0.0; self.n_experts];
        for row in self.scores.chunks(self.n_experts) {
            for (m, &s) in mean.iter_mut().zip(row) {
                *m += s;
            }
        }
        mean.iter_mut().for_each(|m| *m /= t);
        Concentration::of_means(&mean)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Concentration {
    /// Largest per-expert mean score.
    pub max_mean: f64,
    /// Entropy (nats) of the mean scores normalised to a distribution.
    pub entropy: f64,
}

impl Concentration {
    pub fn of_means(mean: &[f64]) -> Self {
        let max_mean = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = mean.iter().sum();
        let entropy = if total > 0.0 {
            -mean
                .iter()
                .map(|m| m / total)
                .filter(|&p| p > 0.0)
                .map(|p| p * p.ln())
                .sum::<f64>()
        } else {
            0.0
        };
        Self { max_mean, entropy }
    }
}

/// Runs every sequence through the model in `mode` and gathers the routing of
/// each layer. Sequences run in parallel; the merge keeps input order.
pub fn routing_trace<T: Real>(
    params: &TransformerParams<T>,
    sequences: &[Vec<u8>],
    mode: FfnMode,
) -> Result<Vec<LayerRouting>> {
    if sequences.is_empty() || sequences.iter().any(Vec::is_empty) {
        return Err(invalid!("empty evaluation set"));
    }
    if !mode.needs_partitions() && !matches!(mode, FfnMode::Magnitude { .. }) {
        return Err(invalid!("mode {mode:?} makes no routing decisions"));
    }
    let outs = sequences
        .par_iter()
        .map(|s| forward_lm(params, s, mode))
        .collect::<Result<Vec<_>>>()?;
    (0..params.config.n_layers)
        .map(|l| {
            let ds = outs
                .iter()
                .map(|o| {
                    o.decisions[l]
                        .as_ref()
                        .ok_or_else(|| invalid!("layer {l} ran dense"))
                })
                .collect::<Result<Vec<_>>>()?;
            LayerRouting::from_decisions(&ds)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnionRow {
    pub batch_size: usize,
    pub per_layer: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub tau: f64,
    /// Content hash of the evaluation bytes.
    pub eval_hash: String,
    pub tokens: usize,
    pub n_experts: usize,
    pub threads: usize,
    pub layer_sparsity: Vec<f64>,
    /// Equal-weight mean of `layer_sparsity`.
    pub overall_sparsity: f64,
    pub histograms: Vec<Vec<u64>>,
    pub union: Vec<UnionRow>,
    pub concentration: Vec<Concentration>,
    /// Per layer, fraction of scores within `NEAR_TAU_BAND` of τ.
    pub near_tau_fraction: Vec<f64>,
}

/// Union batch sizes 1, 2, 4, ... up to the token count (at most 1024).
pub fn union_batch_sizes(tokens: usize) -> Vec<usize> {
    std::iter::successors(Some(1usize), |b| Some(b * 2))
        .take_while(|&b| b <= tokens.min(1024))
        .collect()
}

impl SparsityReport {
    pub fn from_trace(trace: &[LayerRouting], tau: f64, eval_hash: &str) -> Result<Self> {
        let first = trace.first().ok_or_else(|| invalid!("no layers"))?;
        let tokens = first.tokens();
        if tokens == 0 {
            return Err(invalid!("empty evaluation set"));
        }
        let layer_sparsity: Vec<f64> = trace.iter().map(LayerRouting::sparsity).collect();
        let union = union_batch_sizes(tokens)
            .into_iter()
            .map(|b| UnionRow {
                batch_size: b,
                per_layer: trace
                    .iter()
                    .map(|l| l.union_by_group(b).unwrap_or(f64::NAN))
                    .collect(),
            })
            .collect();
        Ok(Self {
            tau,
            eval_hash: eval_hash.to_string(),
            tokens,
            n_experts: first.n_experts,
            threads: rayon::current_num_threads(),
            overall_sparsity: layer_sparsity.iter().sum::<f64>() / layer_sparsity.len() as f64,
            layer_sparsity,
            histograms: trace.iter().map(LayerRouting::histogram).collect(),
            union,
            concentration: trace.iter().map(LayerRouting::concentration).collect(),
            near_tau_fraction: trace
                .iter()
                .map(|l| l.fraction_in(tau - NEAR_TAU_BAND, tau + NEAR_TAU_BAND))
                .collect(),
        })
    }

    /// Key-value header followed by tab-separated tables.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# sparsity report");
        let _ = writeln!(s, "eval_hash = {}", self.eval_hash);
        let _ = writeln!(s, "tau = {}", self.tau);
        let _ = writeln!(s, "tokens = {}", self.tokens);
        let _ = writeln!(s, "n_layers = {}", self.layer_sparsity.len());
        let _ = writeln!(s, "n_experts = {}", self.n_experts);
        let _ = writeln!(s, "threads = {}", self.threads);
        let _ = writeln!(s, "overall_sparsity = {:.9}", self.overall_sparsity);
        let _ = writeln!(
            s,
            "\n[layers]\nlayer\tsparsity\tmax_mean_score\tentropy\tnear_tau_fraction"
        );
        for (l, sp) in self.layer_sparsity.iter().enumerate() {
            let c = self.concentration[l];
            let _ = writeln!(
                s,
                "{l}\t{sp:.9}\t{:.9}\t{:.9}\t{:.9}",
                c.max_mean, c.entropy, self.near_tau_fraction[l]
            );
        }
        let _ = write!(s, "\n[union]\nbatch_size");
        for l in 0..self.layer_sparsity.len() {
            let _ = write!(s, "\tlayer{l}");
        }
        s.push('\n');
        for row in &self.union {
            let _ = write!(s, "{}", row.batch_size);
            for v in &row.per_layer {
                let _ = write!(s, "\t{v:.9}");
            }
            s.push('\n');
        }
        let _ = writeln!(s, "\n[histogram]\nlayer\tbin_lo\tbin_hi\tcount");
        for (l, h) in self.histograms.iter().enumerate() {
            for (i, c) in h.iter().enumerate() {
                let w = 1.0 / HISTOGRAM_BINS as f64;
                let _ = writeln!(
                    s,
                    "{l}\t{:.6}\t{:.6}\t{c}",
                    i as f64 * w,
                    (i + 1) as f64 * w
                );
            }
        }
        s
    }
}

/// Discrete-mode report at threshold `tau`.
pub fn layer_sparsity_report<T: Real>(
    params: &TransformerParams<T>,
    sequences: &[Vec<u8>],
    tau: f64,
) -> Result<SparsityReport> {
    let trace = routing_trace(params, sequences, FfnMode::MoeDiscrete { tau })?;
    SparsityReport::from_trace(
        &trace,
        tau,
        &crate::corpus::content_hash(&sequences.concat()),
    )
}

/// Per-layer union sparsity over all tokens of `sequences`.
pub fn union_sparsity<T: Real>(
    params: &TransformerParams<T>,
    sequences: &[Vec<u8>],
    tau: f64,
) -> Result<Vec<f64>> {
    let trace = routing_trace(params, sequences, FfnMode::MoeDiscrete { tau })?;
    Ok(trace
        .iter()
        .map(|l| l.union_sparsity(0..l.tokens()))
        .collect())
}

/// Per-layer concentration of the router's scores under `mode`: sigmoid
/// scores for the threshold modes, renormalised top-k weights for softmax.
pub fn score_concentration<T: Real>(
    params: &TransformerParams<T>,
    sequences: &[Vec<u8>],
    mode: FfnMode,
) -> Result<Vec<Concentration>> {
    Ok(routing_trace(params, sequences, mode)?
        .iter()
        .map(LayerRouting::concentration)
        .collect())
}
