//! `.pgl` checkpoint format.
//!
//! ```text
//! <compact UTF-8 JSON header> "\n\0" <payload>
//! ```
//!
//! The header carries the model config and a tensor manifest (name, shape,
//! byte offset into the payload). The payload is the concatenation of every
//! tensor in manifest order as little-endian IEEE-754 `f32`, row-major.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::weights::{LayerWeights, WeightStore, LAYER_MATRICES};
use crate::error::{Error, Result};
use crate::kernel::Tensor;

pub const FORMAT: &str = "pgl";
pub const VERSION: u32 = 1;
pub const SEPARATOR: &[u8] = b"\n\0";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// Serializes a store to checkpoint bytes.
pub fn to_bytes(store: &WeightStore) -> Result<Vec<u8>> {
    store.validate()?;
    let params = store.named_params();
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0;
    for (name, p) in &params {
        tensors.push(ManifestEntry {
            name: name.clone(),
            shape: p.shape(),
            offset,
        });
        offset += p.data().len() * 4;
    }
    let header = Header {
        format: FORMAT.to_string(),
        version: VERSION,
        config: store.config.clone(),
        tensors,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.extend_from_slice(SEPARATOR);
    out.reserve(offset);
    for (_, p) in &params {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn malformed(reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: "<bytes>".into(),
        reason: reason.into(),
    }
}

/// Parses checkpoint bytes, validating every invariant.
pub fn from_bytes(bytes: &[u8]) -> Result<WeightStore> {
    let split = bytes
        .windows(SEPARATOR.len())
        .position(|w| w == SEPARATOR)
        .ok_or_else(|| malformed("missing header separator"))?;
    let header: Header = serde_json::from_slice(&bytes[..split])
        .map_err(|e| malformed(format!("malformed header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(malformed(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    header.config.validate()?;
    let payload = &bytes[split + SEPARATOR.len()..];

    let expected = WeightStore::expected_manifest(&header.config);
    if header.tensors.len() != expected.len() {
        return Err(malformed(format!(
            "manifest lists {} tensors, config implies {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    let mut offset = 0;
    let mut values: Vec<Vec<f32>> = Vec::with_capacity(expected.len());
    for (entry, (name, shape)) in header.tensors.iter().zip(&expected) {
        if &entry.name != name {
            return Err(malformed(format!(
                "manifest entry `{}` where `{name}` was expected",
                entry.name
            )));
        }
        if &entry.shape != shape {
            return Err(Error::Shape(format!(
                "tensor `{name}` declared with shape {:?}, config requires {:?}",
                entry.shape, shape
            )));
        }
        if entry.offset != offset {
            return Err(malformed(format!(
                "tensor `{name}` at offset {}, expected {offset}",
                entry.offset
            )));
        }
        let len: usize = shape.iter().product();
        let end = offset + len * 4;
        let raw = payload
            .get(offset..end)
            .ok_or_else(|| malformed(format!("payload truncated in tensor `{name}`")))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                tensor: name.clone(),
                index,
            });
        }
        values.push(data);
        offset = end;
    }
    if payload.len() != offset {
        return Err(malformed(format!(
            "{} trailing payload bytes",
            payload.len() - offset
        )));
    }

    let config = header.config;
    let d = config.hidden;
    let mut it = values.into_iter();
    let embedding = Tensor::new(config.vocab, d, it.next().unwrap())?;
    let mut layers = Vec::with_capacity(config.num_layers());
    for lc in &config.layers {
        let pre_attn_gamma = it.next().unwrap();
        let post_attn_gamma = lc.attn_post_norm.then(|| it.next().unwrap());
        let pre_ffn_gamma = it.next().unwrap();
        let post_ffn_gamma = lc.ffn_post_norm.then(|| it.next().unwrap());
        let mut mats = Vec::with_capacity(LAYER_MATRICES.len());
        for name in LAYER_MATRICES {
            let (r, c) = LayerWeights::expected_shape(name, d, config.head_dim, lc);
            mats.push(Tensor::new(r, c, it.next().unwrap())?);
        }
        let mut mats = mats.into_iter();
        layers.push(LayerWeights {
            pre_attn_gamma,
            post_attn_gamma,
            pre_ffn_gamma,
            post_ffn_gamma,
            wq: mats.next().unwrap(),
            wk: mats.next().unwrap(),
            wv: mats.next().unwrap(),
            wo: mats.next().unwrap(),
            w_gate: mats.next().unwrap(),
            w_up: mats.next().unwrap(),
            w_down: mats.next().unwrap(),
        });
    }
    let final_gamma = it.next().unwrap();
    let output_head = Tensor::new(d, config.vocab, it.next().unwrap())?;
    let store = WeightStore {
        config,
        embedding,
        layers,
        final_gamma,
        output_head,
    };
    store.validate()?;
    Ok(store)
}

pub fn save_checkpoint(store: &WeightStore, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(store)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<WeightStore> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint { reason, .. } => Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })
}
