//! Partitioning of FFN intermediate neurons into equal-size experts.
//!
//! Two methods: capacity-constrained (balanced) K-means over per-neuron
//! weight vectors, and a uniform random grouping used as the ablation
//! baseline. Both produce an exactly balanced [`ExpertPartition`] whose
//! permutation lays each expert's neurons out contiguously.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, LteError, Result};
use crate::model::{Ffn, MoeAttachment, NeuronLayout, RouterKind, TransformerParams};
use crate::numerics::{Real, Rng, Tensor};
use crate::routing::RouterLayer;

pub const DEFAULT_KMEANS_ITERS: usize = 50;
const MAX_SWAP_PASSES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingMethod {
    Kmeans,
    Random,
}

impl GroupingMethod {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "kmeans" => Some(Self::Kmeans),
            "random" => Some(Self::Random),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Kmeans => "kmeans",
            Self::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertPartition {
    pub layer: usize,
    pub n_experts: usize,
    pub expert_size: usize,
    /// Neuron index → expert id.
    pub assignment: Vec<usize>,
    /// Position → original neuron; expert `e` occupies positions
    /// `[e·expert_size, (e+1)·expert_size)`.
    pub permutation: Vec<usize>,
    pub method: GroupingMethod,
}

impl ExpertPartition {
    /// Builds the partition and its canonical permutation (experts in id
    /// order, neurons ascending within an expert). Fails unless every expert
    /// holds exactly `expert_size` neurons.
    pub fn from_assignment(
        layer: usize,
        assignment: Vec<usize>,
        n_experts: usize,
        method: GroupingMethod,
    ) -> Result<Self> {
        let d_ffn = assignment.len();
        check_divisible(d_ffn, n_experts)?;
        let expert_size = d_ffn / n_experts;
        let mut members = vec![Vec::with_capacity(expert_size); n_experts];
        for (neuron, &e) in assignment.iter().enumerate() {
            if e >= n_experts {
                return Err(invalid!("expert id {e} out of range {n_experts}"));
            }
            members[e].push(neuron);
        }
        if let Some((e, m)) = members
            .iter()
            .enumerate()
            .find(|(_, m)| m.len() != expert_size)
        {
            return Err(invalid!(
                "expert {e} has {} neurons, expected {expert_size}",
                m.len()
            ));
        }
        let permutation = members.concat();
        Ok(Self {
            layer,
            n_experts,
            expert_size,
            assignment,
            permutation,
            method,
        })
    }

    pub fn with_layer(mut self, layer: usize) -> Self {
        self.layer = layer;
        self
    }

    pub fn d_ffn(&self) -> usize {
        self.assignment.len()
    }

    pub fn inverse_permutation(&self) -> Vec<usize> {
        let mut inv = vec![0; self.permutation.len()];
        for (pos, &n) in self.permutation.iter().enumerate() {
            inv[n] = pos;
        }
        inv
    }

    /// Original neuron ids of expert `e`.
    pub fn members(&self, e: usize) -> &[usize] {
        &self.permutation[e * self.expert_size..(e + 1) * self.expert_size]
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.n_experts];
        for &e in &self.assignment {
            s[e] += 1;
        }
        s
    }
}

fn check_divisible(d_ffn: usize, n_experts: usize) -> Result<()> {
    if n_experts == 0 || d_ffn == 0 || !d_ffn.is_multiple_of(n_experts) {
        return Err(invalid!(
            "n_experts {n_experts} does not divide d_ffn {d_ffn}"
        ));
    }
    Ok(())
}

/// Balanced K-means result with the objective after every iteration.
#[derive(Debug, Clone)]
pub struct KmeansTrace {
    pub partition: ExpertPartition,
    pub sse_history: Vec<f64>,
    pub iterations: usize,
}

pub fn group_experts_kmeans<T: Real>(
    features: &Tensor<T>,
    n_experts: usize,
    rng: &mut Rng,
    max_iters: usize,
) -> Result<ExpertPartition> {
    group_experts_kmeans_traced(features, n_experts, rng, max_iters).map(|t| t.partition)
}

/// Capacity-constrained K-means over the rows of `features` (one row per neuron).
///
/// Each iteration assigns neurons greedily in ascending order of squared
/// distance to the current centroids, never exceeding `d_ffn / n_experts`
/// members per centroid, then refines the assignment with improving pairwise
/// swaps and recomputes the centroids. An assignment is only accepted when it
/// strictly lowers the objective, so the recorded SSE never increases.
pub fn group_experts_kmeans_traced<T: Real>(
    features: &Tensor<T>,
    n_experts: usize,
    rng: &mut Rng,
    max_iters: usize,
) -> Result<KmeansTrace> {
    let n = features.rows();
    check_divisible(n, n_experts)?;
    if max_iters == 0 {
        return Err(invalid!("max_iters must be >= 1"));
    }
    let cap = n / n_experts;
    let dim = features.cols();
    let points: Vec<f64> = features
        .data()
        .iter()
        .map(|v| v.to_f64().unwrap_or(0.0))
        .collect();
    let point = |i: usize| &points[i * dim..(i + 1) * dim];

    let mut centroids: Vec<f64> = rng
        .sample_distinct(n, n_experts)
        .into_iter()
        .flat_map(|i| point(i).to_vec())
        .collect();

    let mut assignment: Option<Vec<usize>> = None;
    let mut sse_history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        let dist = distance_table(&points, &centroids, dim, n, n_experts);
        let mut candidate = greedy_capacity_assign(&dist, n, n_experts, cap);
        refine_by_swaps(&mut candidate, &dist, n_experts);
        if let Some(current) = &assignment {
            if *current == candidate {
                break;
            }
            let cur = assignment_cost(current, &dist, n_experts);
            if assignment_cost(&candidate, &dist, n_experts) >= cur {
                break;
            }
        }
        centroids = compute_centroids(&points, &candidate, dim, n_experts);
        sse_history.push(sse_with_centroids(&points, &candidate, &centroids, dim));
        assignment = Some(candidate);
    }
    let assignment = assignment.expect("at least one iteration ran");
    let partition =
        ExpertPartition::from_assignment(0, assignment, n_experts, GroupingMethod::Kmeans)?;
    Ok(KmeansTrace {
        partition,
        sse_history,
        iterations,
    })
}

fn distance_table(points: &[f64], centroids: &[f64], dim: usize, n: usize, k: usize) -> Vec<f64> {
    let mut d = vec![0.0; n * k];
    for i in 0..n {
        let p = &points[i * dim..(i + 1) * dim];
        for c in 0..k {
            let q = &centroids[c * dim..(c + 1) * dim];
            d[i * k + c] = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
        }
    }
    d
}

/// Ties are broken by lower neuron index, then lower centroid index.
fn greedy_capacity_assign(dist: &[f64], n: usize, k: usize, cap: usize) -> Vec<usize> {
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..k).map(move |c| (i, c))).collect();
    pairs.sort_by(|&(i, c), &(j, e)| {
        dist[i * k + c]
            .total_cmp(&dist[j * k + e])
            .then(i.cmp(&j))
            .then(c.cmp(&e))
    });
    let mut assignment = vec![usize::MAX; n];
    let mut load = vec![0; k];
    let mut remaining = n;
    for (i, c) in pairs {
        if assignment[i] == usize::MAX && load[c] < cap {
            assignment[i] = c;
            load[c] += 1;
            remaining -= 1;
            if remaining == 0 {
                break;
            }
        }
    }
    assignment
}

/// Swaps pairs of neurons between clusters while that lowers the summed
/// distance to the (fixed) centroids. Cluster sizes are unchanged.
fn refine_by_swaps(assignment: &mut [usize], dist: &[f64], k: usize) {
    let n = assignment.len();
    for _ in 0..MAX_SWAP_PASSES {
        let mut improved = false;
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (assignment[i], assignment[j]);
                if a == b {
                    continue;
                }
                let gain = dist[i * k + a] + dist[j * k + b] - dist[i * k + b] - dist[j * k + a];
                if gain > 1e-12 {
                    assignment.swap(i, j);
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
}

fn assignment_cost(assignment: &[usize], dist: &[f64], k: usize) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &c)| dist[i * k + c])
        .sum()
}

fn compute_centroids(points: &[f64], assignment: &[usize], dim: usize, k: usize) -> Vec<f64> {
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (i, &c) in assignment.iter().enumerate() {
        counts[c] += 1;
        for (s, &p) in sums[c * dim..(c + 1) * dim]
            .iter_mut()
            .zip(&points[i * dim..(i + 1) * dim])
        {
            *s += p;
        }
    }
    for c in 0..k {
        let inv = 1.0 / counts[c].max(1) as f64;
        for s in &mut sums[c * dim..(c + 1) * dim] {
            *s *= inv;
        }
    }
    sums
}

fn sse_with_centroids(points: &[f64], assignment: &[usize], centroids: &[f64], dim: usize) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            points[i * dim..(i + 1) * dim]
                .iter()
                .zip(&centroids[c * dim..(c + 1) * dim])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum()
}

/// Within-cluster sum of squared distances to each cluster's mean.
pub fn within_cluster_sse<T: Real>(
    features: &Tensor<T>,
    partition: &ExpertPartition,
) -> Result<f64> {
    if features.rows() != partition.d_ffn() {
        return Err(shape_err!(
            "{} feature rows for {} neurons",
            features.rows(),
            partition.d_ffn()
        ));
    }
    let dim = features.cols();
    let points: Vec<f64> = features
        .data()
        .iter()
        .map(|v| v.to_f64().unwrap_or(0.0))
        .collect();
    let centroids = compute_centroids(&points, &partition.assignment, dim, partition.n_experts);
    Ok(sse_with_centroids(
        &points,
        &partition.assignment,
        &centroids,
        dim,
    ))
}

/// Uniform random permutation of the neurons cut into consecutive blocks.
pub fn group_experts_random(
    d_ffn: usize,
    n_experts: usize,
    rng: &mut Rng,
) -> Result<ExpertPartition> {
    check_divisible(d_ffn, n_experts)?;
    let size = d_ffn / n_experts;
    let mut order: Vec<usize> = (0..d_ffn).collect();
    rng.shuffle(&mut order);
    let mut assignment = vec![0; d_ffn];
    for (pos, &neuron) in order.iter().enumerate() {
        assignment[neuron] = pos / size;
    }
    ExpertPartition::from_assignment(0, assignment, n_experts, GroupingMethod::Random)
}

/// Reorders the layer's neurons so every expert is contiguous.
pub fn apply_partition<T: Real>(layer: &Ffn<T>, p: &ExpertPartition) -> Result<Ffn<T>> {
    if p.d_ffn() != layer.d_ffn() {
        return Err(shape_err!(
            "partition over {} neurons for d_ffn {}",
            p.d_ffn(),
            layer.d_ffn()
        ));
    }
    if layer.layout != NeuronLayout::Original {
        return Err(LteError::InvalidArgument(
            "layer is already expert-permuted".into(),
        ));
    }
    let mut out = layer.permute_neurons(&p.permutation)?;
    out.layout = NeuronLayout::ExpertContiguous {
        expert_size: p.expert_size,
    };
    Ok(out)
}

/// Groups every layer of a dense model into experts of `expert_size`
/// neurons, permutes the FFN weights accordingly and attaches fresh sigmoid
/// routers. The dense function is unchanged.
pub fn moefy<T: Real>(
    params: &TransformerParams<T>,
    method: GroupingMethod,
    expert_size: usize,
    rng: &mut Rng,
) -> Result<TransformerParams<T>> {
    if params.has_any_moe() {
        return Err(LteError::StageOrder("model is already MoEfied".into()));
    }
    let mut out = params.clone();
    out.config.expert_size = expert_size;
    out.config.validate()?;
    let (d, f, n) = (out.config.d_model, out.config.d_ffn, out.config.n_experts());
    for (l, block) in out.blocks.iter_mut().enumerate() {
        let part = match method {
            GroupingMethod::Kmeans => {
                group_experts_kmeans(&block.ffn.neuron_features(), n, rng, DEFAULT_KMEANS_ITERS)?
            }
            GroupingMethod::Random => group_experts_random(f, n, rng)?,
        }
        .with_layer(l);
        block.ffn = apply_partition(&block.ffn, &part)?;
        block.moe = Some(MoeAttachment {
            partition: part,
            router: RouterLayer::init(d, n, rng),
        });
    }
    out.router_kind = RouterKind::Sigmoid;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FfnLayer, FfnParams};
    use crate::numerics::Activation;

    #[test]
    fn separates_obvious_1d_clusters() {
        let f = Tensor::<f64>::matrix(4, 1, vec![0.0, 0.1, 10.0, 10.1]).unwrap();
        for seed in 0..10 {
            let p = group_experts_kmeans(&f, 2, &mut Rng::new(seed), 50).unwrap();
            assert_eq!(p.assignment[0], p.assignment[1], "seed {seed}");
            assert_eq!(p.assignment[2], p.assignment[3], "seed {seed}");
            assert_ne!(p.assignment[0], p.assignment[2], "seed {seed}");
        }
    }

    #[test]
    fn capacity_one_gives_singletons() {
        let f = Rng::new(3).normal_tensor::<f64>(&[8, 3], 1.0);
        let p = group_experts_kmeans(&f, 8, &mut Rng::new(1), 10).unwrap();
        assert!(p.sizes().iter().all(|&s| s == 1));
    }

    #[test]
    fn divisibility_errors() {
        let f = Tensor::<f64>::zeros(&[10, 2]);
        assert!(group_experts_kmeans(&f, 3, &mut Rng::new(0), 5).is_err());
        assert!(group_experts_random(10, 3, &mut Rng::new(0)).is_err());
        assert!(group_experts_kmeans(&f, 2, &mut Rng::new(0), 0).is_err());
    }

    #[test]
    fn random_sizes_and_determinism() {
        let p = group_experts_random(64, 2, &mut Rng::new(9)).unwrap();
        assert_eq!(p.sizes(), vec![32, 32]);
        assert_eq!(p, group_experts_random(64, 2, &mut Rng::new(9)).unwrap());
    }

    #[test]
    fn random_co_clustering_probability_is_one_third() {
        let hits = (0..1000)
            .filter(|&s| {
                let p = group_experts_random(4, 2, &mut Rng::new(s)).unwrap();
                p.assignment[0] == p.assignment[1]
            })
            .count();
        // Binomial(1000, 1/3): sd ≈ 14.9
        assert!((hits as f64 - 333.3).abs() < 4.0 * 14.9, "{hits}");
    }

    #[test]
    fn permutation_layout_is_contiguous() {
        let p = group_experts_random(12, 3, &mut Rng::new(2)).unwrap();
        for e in 0..3 {
            assert!(p.members(e).iter().all(|&n| p.assignment[n] == e));
        }
        let mut sorted = p.permutation.clone();
        sorted.sort();
        assert_eq!(sorted, (0..12).collect::<Vec<_>>());
    }

    fn random_ffn(seed: u64) -> Ffn<f64> {
        let mut rng = Rng::new(seed);
        Ffn::dense(FfnParams::TwoMatmul(FfnLayer {
            w1: rng.normal_tensor(&[6, 16], 0.5),
            b1: rng.normal_tensor(&[16], 0.5),
            w2: rng.normal_tensor(&[16, 6], 0.5),
            b2: rng.normal_tensor(&[6], 0.5),
            activation: Activation::GeluTanh,
        }))
    }

    #[test]
    fn apply_partition_round_trip_and_invariance() {
        let ffn = random_ffn(4);
        let p = group_experts_random(16, 4, &mut Rng::new(8)).unwrap();
        let permuted = apply_partition(&ffn, &p).unwrap();
        let x = Rng::new(1).normal_tensor::<f64>(&[5, 6], 1.0);
        let d = ffn
            .forward(&x)
            .unwrap()
            .max_abs_diff(&permuted.forward(&x).unwrap())
            .unwrap();
        assert!(d < 1e-6);
        let back = permuted.permute_neurons(&p.inverse_permutation()).unwrap();
        assert_eq!(back.params, ffn.params);
        assert!(apply_partition(&permuted, &p).is_err());
    }

    #[test]
    fn identity_partition_leaves_layer_unchanged() {
        let ffn = random_ffn(2);
        let assignment: Vec<usize> = (0..16).map(|i| i / 4).collect();
        let p = ExpertPartition::from_assignment(0, assignment, 4, GroupingMethod::Random).unwrap();
        assert_eq!(apply_partition(&ffn, &p).unwrap().params, ffn.params);
    }

    #[test]
    fn moefy_preserves_the_dense_function() {
        use crate::model::{forward_lm, FfnKind, FfnMode, ModelConfig};
        let c = ModelConfig {
            vocab_size: 32,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ffn: 16,
            max_seq_len: 8,
            ffn_kind: FfnKind::TwoMatmul,
            activation: Activation::GeluTanh,
            expert_size: 16,
            tie_embeddings: false,
        };
        let p = TransformerParams::<f64>::init(&c, &mut Rng::new(0)).unwrap();
        let tokens = [1u8, 5, 9, 30, 2];
        let before = forward_lm(&p, &tokens, FfnMode::Dense).unwrap().logits;
        for method in [GroupingMethod::Kmeans, GroupingMethod::Random] {
            let m = moefy(&p, method, 4, &mut Rng::new(1)).unwrap();
            assert!(m.is_moefied());
            assert_eq!(m.config.n_experts(), 4);
            assert!(m
                .blocks
                .iter()
                .all(|b| b.moe.as_ref().unwrap().partition.sizes() == vec![4; 4]));
            let after = forward_lm(&m, &tokens, FfnMode::Dense).unwrap().logits;
            assert!(after.max_abs_diff(&before).unwrap() < 1e-12);
            assert!(moefy(&m, method, 4, &mut Rng::new(1)).is_err());
        }
        assert!(moefy(&p, GroupingMethod::Random, 5, &mut Rng::new(1)).is_err());
    }
}
