//! Expert selection: threshold sigmoid routers in soft and discrete mode, and
//! the baselines (noisy top-k softmax, magnitude oracle, ground-truth top-k,
//! frozen random routers).
//!
//! Every function takes the normalised FFN input `x` (`T × d_model`) of one
//! layer. Expert outputs never include the down-projection bias; it is added
//! once after aggregation.

use crate::error::{invalid, shape_err, Result};
use crate::grouping::ExpertPartition;
use crate::model::{Ffn, NeuronLayout};
use crate::numerics::{lit, matmul, sigmoid, softmax_row, Real, Rng, Tensor};
use crate::sparse_exec::{
    expert_coefficients, pack, sparse_ffn_forward, sparse_ffn_forward_weighted,
};

pub const DEFAULT_TAU: f64 = 0.5;
pub const NOISY_TOPK_STD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct RouterLayer<T = f32> {
    /// `d_model × n_experts`; column `i` scores expert `i`.
    pub wg: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub frozen: bool,
}

impl<T: Real> RouterLayer<T> {
    /// Normal(0, 0.02/√d_model) weights so initial sigmoid scores sit near 0.5.
    pub fn init(d_model: usize, n_experts: usize, rng: &mut Rng) -> Self {
        let std = 0.02 / (d_model as f64).sqrt();
        Self {
            wg: rng.normal_tensor(&[d_model, n_experts], std),
            bias: None,
            frozen: false,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.wg.cols()
    }

    pub fn weight_name(layer: usize) -> String {
        format!("router.{layer}.Wg")
    }

    pub fn bias_name(layer: usize) -> String {
        format!("router.{layer}.bias")
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.expect_cols(self.wg.rows(), "router input")?;
        let z = matmul(x, &self.wg)?;
        match &self.bias {
            Some(b) => z.add_row_vector(b.data()),
            None => Ok(z),
        }
    }

    pub fn cast<U: Real>(&self) -> RouterLayer<U> {
        RouterLayer {
            wg: self.wg.cast(),
            bias: self.bias.as_ref().map(Tensor::cast),
            frozen: self.frozen,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RoutingMode {
    /// Every expert runs, scaled by its score.
    Soft,
    /// Experts with score strictly above `tau`.
    Threshold { tau: f64 },
    /// A fixed number of experts per token.
    TopK { k: usize },
    /// Per-neuron selection by activation magnitude; "experts" are single neurons.
    NeuronMagnitude { keep_fraction: f64 },
}

/// Per-token scores and selection of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision<T = f32> {
    /// `T × n_experts`.
    pub scores: Tensor<T>,
    /// Row-major `T × n_experts`.
    pub mask: Vec<bool>,
    pub mode: RoutingMode,
}

impl<T: Real> RoutingDecision<T> {
    pub fn tokens(&self) -> usize {
        self.scores.rows()
    }

    pub fn n_experts(&self) -> usize {
        self.scores.cols()
    }

    pub fn tau(&self) -> Option<f64> {
        match self.mode {
            RoutingMode::Threshold { tau } => Some(tau),
            _ => None,
        }
    }

    pub fn mask_row(&self, t: usize) -> &[bool] {
        let n = self.n_experts();
        &self.mask[t * n..(t + 1) * n]
    }

    pub fn selected(&self, t: usize) -> Vec<usize> {
        self.mask_row(t)
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn selected_count(&self, t: usize) -> usize {
        self.mask_row(t).iter().filter(|&&m| m).count()
    }

    /// Mean over tokens of `1 - selected / n_experts`.
    pub fn sparsity(&self) -> f64 {
        let n = self.n_experts() as f64;
        let s: f64 = (0..self.tokens())
            .map(|t| 1.0 - self.selected_count(t) as f64 / n)
            .sum();
        s / self.tokens() as f64
    }

    pub fn mean_selected(&self) -> f64 {
        (0..self.tokens())
            .map(|t| self.selected_count(t) as f64)
            .sum::<f64>()
            / self.tokens() as f64
    }
}

fn check_moe_layer<T: Real>(
    layer: &Ffn<T>,
    partition: &ExpertPartition,
    router: Option<&RouterLayer<T>>,
) -> Result<()> {
    if layer.layout
        != (NeuronLayout::ExpertContiguous {
            expert_size: partition.expert_size,
        })
    {
        return Err(invalid!("layer is not permuted by this partition"));
    }
    if partition.d_ffn() != layer.d_ffn() {
        return Err(shape_err!(
            "partition over {} neurons, layer has {}",
            partition.d_ffn(),
            layer.d_ffn()
        ));
    }
    if let Some(r) = router {
        if r.n_experts() != partition.n_experts {
            return Err(shape_err!(
                "router width {} for {} experts",
                r.n_experts(),
                partition.n_experts
            ));
        }
    }
    Ok(())
}

/// `G(x)_i = sigmoid(x · W_g,i)`.
pub fn router_scores<T: Real>(router: &RouterLayer<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(router.logits(x)?.map(sigmoid))
}

/// Discrete selection `Σ_i 1{G(x)_i > τ} E(x)_i`, executed on the packed
/// sparse path.
pub fn moe_forward_discrete<T: Real>(
    layer: &Ffn<T>,
    partition: &ExpertPartition,
    router: &RouterLayer<T>,
    x: &Tensor<T>,
    tau: f64,
) -> Result<(Tensor<T>, RoutingDecision<T>)> {
    check_moe_layer(layer, partition, Some(router))?;
    if !(tau > 0.0 && tau < 1.0) {
        return Err(invalid!("tau must lie in (0, 1), got {tau}"));
    }
    let scores = router_scores(router, x)?;
    let decision = threshold_decision(scores, tau);
    let out = run_selection(layer, &decision, x)?;
    Ok((out, decision))
}

pub fn threshold_decision<T: Real>(scores: Tensor<T>, tau: f64) -> RoutingDecision<T> {
    let t: T = lit(tau);
    let mask = scores.data().iter().map(|&g| g > t).collect();
    RoutingDecision {
        scores,
        mask,
        mode: RoutingMode::Threshold { tau },
    }
}

fn run_selection<T: Real>(
    layer: &Ffn<T>,
    decision: &RoutingDecision<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let packed = pack(layer)?;
    let sel: Vec<Vec<usize>> = (0..decision.tokens())
        .map(|t| decision.selected(t))
        .collect();
    sparse_ffn_forward(&packed, &sel, x)
}

/// Soft mode `Σ_i G(x)_i E(x)_i` plus the shared bias.
pub fn moe_forward_soft<T: Real>(
    layer: &Ffn<T>,
    partition: &ExpertPartition,
    router: &RouterLayer<T>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, RoutingDecision<T>)> {
    check_moe_layer(layer, partition, Some(router))?;
    let scores = router_scores(router, x)?;
    let out = moe_forward_with_scores(layer, partition, &scores, x)?;
    let mask = vec![true; scores.len()];
    Ok((
        out,
        RoutingDecision {
            scores,
            mask,
            mode: RoutingMode::Soft,
        },
    ))
}

/// Soft aggregation with caller-provided expert weights (`T × n_experts`).
pub fn moe_forward_with_scores<T: Real>(
    layer: &Ffn<T>,
    partition: &ExpertPartition,
    scores: &Tensor<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_moe_layer(layer, partition, None)?;
    if scores.rows() != x.rows() || scores.cols() != partition.n_experts {
        return Err(shape_err!(
            "scores {:?} for {} tokens × {} experts",
            scores.shape(),
            x.rows(),
            partition.n_experts
        ));
    }
    let coef = Tensor::from_fn(&[x.rows(), layer.d_ffn()], |i| {
        let (t, j) = (i / layer.d_ffn(), i % layer.d_ffn());
        scores.at(t, j / partition.expert_size)
    });
    layer.forward_scaled(x, &coef)
}

/// Indices of the `k` largest values, ties going to the lower index, in
/// ascending index order.
pub fn top_k_indices<T: Real>(values: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Softmax weights over the top-k logits of each row (zero elsewhere) and
/// the kept indices.
pub fn topk_softmax<T: Real>(logits: &Tensor<T>, k: usize) -> (Tensor<T>, Vec<Vec<usize>>) {
    let n = logits.cols();
    let mut weights = Tensor::zeros(&[logits.rows(), n]);
    let mut kept = Vec::with_capacity(logits.rows());
    for t in 0..logits.rows() {
        let row = logits.row(t);
        let sel = top_k_indices(row, k);
        let mut vals: Vec<T> = sel.iter().map(|&i| row[i]).collect();
        softmax_row(&mut vals);
        for (&i, &w) in sel.iter().zip(&vals) {
            weights.row_mut(t)[i] = w;
        }
        kept.push(sel);
    }
    (weights, kept)
}

/// Noisy top-k softmax routing. Gaussian noise of `noise_std` is added to the
/// logits when `rng` is given (training); evaluation passes `None`.
pub fn noisy_topk_forward<T: Real>(
    layer: &Ffn<T>,
    partition: &ExpertPartition,
    router: &RouterLayer<T>,
    x: &Tensor<T>,
    k: usize,
    noise_std: f64,
    rng: Option<&mut Rng>,
) -> Result<(Tensor<T>, RoutingDecision<T>)> {
    check_moe_layer(layer, partition, Some(router))?;
    let n = partition.n_experts;
    if k == 0 || k > n {
        return Err(invalid!("k = {k} outside [1, {n}]"));
    }
    if noise_std < 0.0 {
        return Err(invalid!("noise_std must be >= 0"));
    }
    let mut logits = router.logits(x)?;
    if let Some(rng) = rng {
        for v in logits.data_mut() {
            *v += lit(rng.normal() * noise_std);
        }
    }
    let (weights, kept) = topk_softmax(&logits, k);
    let packed = pack(layer)?;
    let w: Vec<Vec<T>> = kept
        .iter()
        .enumerate()
        .map(|(t, s)| s.iter().map(|&i| weights.at(t, i)).collect())
        .collect();
    let out = sparse_ffn_forward_weighted(&packed, &kept, &w, x)?;
    let mask = weights
        .data()
        .iter()
        .map(|&v| v > T::zero())
        .collect::<Vec<_>>();
    let mut mask = mask;
    for (t, s) in kept.iter().enumerate() {
        for &i in s {
            mask[t * n + i] = true;
        }
    }
    Ok((
        out,
        RoutingDecision {
            scores: weights,
            mask,
            mode: RoutingMode::TopK { k },
        },
    ))
}

/// Per-token neuron selection by activation magnitude (an exact-value oracle
/// in place of a trained predictor): keeps the `⌈keep_fraction · d_ffn⌉`
/// intermediate values largest in absolute value.
pub fn magnitude_select<T: Real>(
    layer: &Ffn<T>,
    x: &Tensor<T>,
    keep_fraction: f64,
) -> Result<(Tensor<T>, RoutingDecision<T>)> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(invalid!(
            "keep_fraction must lie in (0, 1], got {keep_fraction}"
        ));
    }
    let f = layer.d_ffn();
    let keep = ((keep_fraction * f as f64).ceil() as usize).min(f);
    let a = layer.intermediate(x)?;
    let mut masked = a.clone();
    let mut mask = vec![false; a.len()];
    for t in 0..a.rows() {
        let mags: Vec<T> = a.row(t).iter().map(|v| v.abs()).collect();
        for j in top_k_indices(&mags, keep) {
            mask[t * f + j] = true;
        }
        for (j, v) in masked.row_mut(t).iter_mut().enumerate() {
            if !mask[t * f + j] {
                *v = T::zero();
            }
        }
    }
    let out = layer.project_down(&masked)?;
    let scores = a.map(|v| v.abs());
    Ok((
        out,
        RoutingDecision {
            scores,
            mask,
            mode: RoutingMode::NeuronMagnitude { keep_fraction },
        },
    ))
}

/// Keeps the `k` experts whose true post-activation slices have the largest
/// L2 norm.
pub fn groundtruth_topk_select<T: Real>(
    layer: &Ffn<T>,
    partition: &ExpertPartition,
    x: &Tensor<T>,
    k: usize,
) -> Result<(Tensor<T>, RoutingDecision<T>)> {
    check_moe_layer(layer, partition, None)?;
    let n = partition.n_experts;
    if k == 0 || k > n {
        return Err(invalid!("k = {k} outside [1, {n}]"));
    }
    let es = partition.expert_size;
    let a = layer.intermediate(x)?;
    let norms = Tensor::from_fn(&[x.rows(), n], |i| {
        let (t, e) = (i / n, i % n);
        a.row(t)[e * es..(e + 1) * es]
            .iter()
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    });
    let sel: Vec<Vec<usize>> = (0..x.rows())
        .map(|t| top_k_indices(norms.row(t), k))
        .collect();
    let coef = expert_coefficients::<T>(&sel, None, n, es);
    let out = layer.project_down(&a.zip_map(&coef, |v, c| v * c)?)?;
    Ok((out, topk_decision(norms, &sel, k)))
}

fn topk_decision<T: Real>(scores: Tensor<T>, sel: &[Vec<usize>], k: usize) -> RoutingDecision<T> {
    let n = scores.cols();
    let mut mask = vec![false; scores.len()];
    for (t, s) in sel.iter().enumerate() {
        for &i in s {
            mask[t * n + i] = true;
        }
    }
    RoutingDecision {
        scores,
        mask,
        mode: RoutingMode::TopK { k },
    }
}

/// A frozen router with random weights, used with [`router_topk_forward`].
pub fn random_router_init<T: Real>(
    d_model: usize,
    n_experts: usize,
    rng: &mut Rng,
) -> RouterLayer<T> {
    RouterLayer {
        wg: rng.normal_tensor(&[d_model, n_experts], 1.0 / (d_model as f64).sqrt()),
        bias: None,
        frozen: true,
    }
}

/// Top-k selection by router score, summing the selected experts unweighted.
pub fn router_topk_forward<T: Real>(
    layer: &Ffn<T>,
    partition: &ExpertPartition,
    router: &RouterLayer<T>,
    x: &Tensor<T>,
    k: usize,
) -> Result<(Tensor<T>, RoutingDecision<T>)> {
    check_moe_layer(layer, partition, Some(router))?;
    let n = partition.n_experts;
    if k == 0 || k > n {
        return Err(invalid!("k = {k} outside [1, {n}]"));
    }
    let scores = router_scores(router, x)?;
    let sel: Vec<Vec<usize>> = (0..x.rows())
        .map(|t| top_k_indices(scores.row(t), k))
        .collect();
    let decision = topk_decision(scores, &sel, k);
    let out = run_selection(layer, &decision, x)?;
    Ok((out, decision))
}
