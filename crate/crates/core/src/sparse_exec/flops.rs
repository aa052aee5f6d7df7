use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;

/// Per-token FLOPs of the FFN layers, counting a multiply-add as 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub dense_ffn: f64,
    /// Expert computation actually executed (scaled by the selected fraction).
    pub sparse_ffn: f64,
    pub router: f64,
    /// `sparse_ffn + router`.
    pub sparse_total: f64,
    /// `router / dense_ffn`.
    pub router_share: f64,
    /// `1 - sparse_ffn / dense_ffn`.
    pub ffn_sparsity: f64,
}

/// `mean_selected[l]` is the mean number of experts selected per token in
/// layer `l`; layers without an entry count as fully dense.
pub fn flops_per_token(config: &ModelConfig, mean_selected: &[f64]) -> FlopsReport {
    let n = config.n_experts() as f64;
    let per_layer = config.ffn_kind.flops_per_neuron(config.d_model) * config.d_ffn as f64;
    let router_per_layer = 2.0 * config.d_model as f64 * n;
    let dense_ffn = per_layer * config.n_layers as f64;
    let sparse_ffn: f64 = (0..config.n_layers)
        .map(|l| {
            per_layer
                * mean_selected
                    .get(l)
                    .map_or(1.0, |&k| (k / n).clamp(0.0, 1.0))
        })
        .sum();
    let router = router_per_layer * config.n_layers as f64;
    FlopsReport {
        dense_ffn,
        sparse_ffn,
        router,
        sparse_total: sparse_ffn + router,
        router_share: router / dense_ffn,
        ffn_sparsity: 1.0 - sparse_ffn / dense_ffn,
    }
}
