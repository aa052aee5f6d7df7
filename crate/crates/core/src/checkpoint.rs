//! Checkpoint format: a pretty-printed JSON manifest plus one blob of
//! little-endian f32 values. Both files start from the magic `LTE1`
//! (manifest field, blob header). Tensors are stored in canonical order, so
//! equal parameters always produce equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LteError, Result};
use crate::grouping::ExpertPartition;
use crate::model::{ModelConfig, MoeAttachment, NeuronLayout, RouterKind, TransformerParams};
use crate::numerics::{Real, Rng, Tensor};
use crate::routing::RouterLayer;
use crate::training::Stage;

pub const MAGIC: &str = "LTE1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const PRECISION: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob, counted from its first byte (the magic).
    pub offset: usize,
    pub byte_len: usize,
    pub precision: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub magic: String,
    pub stage: Stage,
    pub model: ModelConfig,
    pub router_kind: RouterKind,
    /// One entry per layer; `None` for dense layers.
    pub partitions: Vec<Option<ExpertPartition>>,
    pub tensors: Vec<TensorEntry>,
    /// Free-form provenance (seed, corpus hash, ...).
    pub meta: BTreeMap<String, String>,
}

/// Serialises to (manifest text, blob bytes).
pub fn encode<T: Real>(
    params: &TransformerParams<T>,
    stage: Stage,
    meta: BTreeMap<String, String>,
) -> Result<(String, Vec<u8>)> {
    let mut blob = MAGIC.as_bytes().to_vec();
    let mut tensors = Vec::new();
    for (name, t) in params.named_tensors() {
        let offset = blob.len();
        for &v in t.data() {
            let f = v.to_f64().unwrap_or(f64::NAN) as f32;
            blob.extend_from_slice(&f.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            byte_len: blob.len() - offset,
            precision: PRECISION.into(),
        });
    }
    let manifest = Manifest {
        magic: MAGIC.into(),
        stage,
        model: params.config.clone(),
        router_kind: params.router_kind,
        partitions: params
            .blocks
            .iter()
            .map(|b| b.moe.as_ref().map(|m| m.partition.clone()))
            .collect(),
        tensors,
        meta,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    Ok((text, blob))
}

/// Rebuilds parameters from a manifest and blob.
pub fn decode<T: Real>(
    manifest_text: &str,
    blob: &[u8],
) -> Result<(TransformerParams<T>, Manifest)> {
    let manifest: Manifest = serde_json::from_str(manifest_text)
        .map_err(|e| LteError::Checkpoint(format!("manifest does not parse: {e}")))?;
    if manifest.magic != MAGIC || !blob.starts_with(MAGIC.as_bytes()) {
        return Err(LteError::Checkpoint(format!("missing magic {MAGIC}")));
    }
    manifest.model.validate()?;
    if manifest.partitions.len() != manifest.model.n_layers {
        return Err(LteError::Checkpoint(format!(
            "{} partition entries for {} layers",
            manifest.partitions.len(),
            manifest.model.n_layers
        )));
    }
    let entries: BTreeMap<&str, &TensorEntry> = manifest
        .tensors
        .iter()
        .map(|e| (e.name.as_str(), e))
        .collect();

    // Skeleton with the right structure; every value is overwritten below.
    let mut params = TransformerParams::<T>::init(&manifest.model, &mut Rng::new(0))?;
    params.router_kind = manifest.router_kind;
    let d = manifest.model.d_model;
    for (l, (block, part)) in params
        .blocks
        .iter_mut()
        .zip(&manifest.partitions)
        .enumerate()
    {
        let Some(part) = part else { continue };
        if part.expert_size != manifest.model.expert_size || part.d_ffn() != manifest.model.d_ffn {
            return Err(LteError::Checkpoint(format!(
                "partition of layer {l} disagrees with the model config"
            )));
        }
        block.ffn.layout = NeuronLayout::ExpertContiguous {
            expert_size: part.expert_size,
        };
        let has_bias = entries.contains_key(RouterLayer::<T>::bias_name(l).as_str());
        block.moe = Some(MoeAttachment {
            partition: part.clone(),
            router: RouterLayer {
                wg: Tensor::zeros(&[d, part.n_experts]),
                bias: has_bias.then(|| Tensor::zeros(&[part.n_experts])),
                frozen: false,
            },
        });
    }

    let mut seen = 0;
    for (name, t) in params.named_tensors_mut() {
        let e = entries
            .get(name.as_str())
            .ok_or_else(|| LteError::Checkpoint(format!("tensor {name} missing from manifest")))?;
        if e.shape != t.shape() || e.precision != PRECISION || e.byte_len != 4 * t.len() {
            return Err(LteError::Checkpoint(format!(
                "entry for {name} does not match the model"
            )));
        }
        let bytes = blob
            .get(e.offset..e.offset + e.byte_len)
            .ok_or_else(|| LteError::Checkpoint(format!("tensor {name} runs past the blob")))?;
        for (dst, chunk) in t.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            *dst = T::from(v).unwrap_or_else(T::nan);
        }
        seen += 1;
    }
    if seen != manifest.tensors.len() {
        return Err(LteError::Checkpoint(format!(
            "manifest lists {} tensors, model has {seen}",
            manifest.tensors.len()
        )));
    }
    Ok((params, manifest))
}

pub fn save<T: Real>(
    dir: &Path,
    params: &TransformerParams<T>,
    stage: Stage,
    meta: BTreeMap<String, String>,
) -> Result<()> {
    let (text, blob) = encode(params, stage, meta)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    fs::write(dir.join(WEIGHTS_FILE), blob)?;
    Ok(())
}

pub fn load<T: Real>(dir: &Path) -> Result<(TransformerParams<T>, Manifest)> {
    let read = |f: &str| {
        fs::read(dir.join(f)).map_err(|e| {
            LteError::Checkpoint(format!("cannot read {}: {e}", dir.join(f).display()))
        })
    };
    let text = String::from_utf8(read(MANIFEST_FILE)?)
        .map_err(|_| LteError::Checkpoint("manifest is not UTF-8".into()))?;
    decode(&text, &read(WEIGHTS_FILE)?)
}
