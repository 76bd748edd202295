//! Checkpoint file: a magic line, a one-line JSON header with the config
//! and an ordered tensor manifest, then one little-endian `f32` blob.
//!
//! ```text
//! attn-scalpel-checkpoint v1\n
//! {"config":{…},"tied_embeddings":false,"dtype":"f32-le","tensors":[{"name":…,"shape":[…],"offset":…}],"blob_bytes":…}\n
//! <blob>
//! ```
//!
//! Offsets are byte offsets from the start of the blob.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{HeadWeights, LayerWeights, ModelConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "attn-scalpel-checkpoint v1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tied_embeddings: bool,
    dtype: String,
    tensors: Vec<TensorEntry>,
    blob_bytes: u64,
}

pub fn encode_checkpoint(weights: &ModelWeights) -> Result<Vec<u8>> {
    weights.validate()?;
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    for (name, t) in weights.named_tensors() {
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let header = Header {
        config: weights.config,
        tied_embeddings: false,
        dtype: "f32-le".into(),
        tensors: entries,
        blob_bytes: blob.len() as u64,
    };
    let mut out = Vec::with_capacity(blob.len() + 4096);
    out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
    out.push(b'\n');
    out.extend(serde_json::to_vec(&header).map_err(|e| Error::json("checkpoint header", e))?);
    out.push(b'\n');
    out.extend(blob);
    Ok(out)
}

pub fn write_checkpoint(path: &Path, weights: &ModelWeights) -> Result<()> {
    let bytes = encode_checkpoint(weights)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn split_line(bytes: &[u8]) -> Option<(&[u8], &[u8])> {
    let nl = bytes.iter().position(|&b| b == b'\n')?;
    Some((&bytes[..nl], &bytes[nl + 1..]))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelWeights> {
    let bad = |msg: &str| Error::Data(format!("malformed checkpoint: {msg}"));
    let (magic, rest) = split_line(bytes).ok_or_else(|| bad("missing magic line"))?;
    if magic != CHECKPOINT_MAGIC.as_bytes() {
        return Err(bad("unrecognized magic line"));
    }
    let (header_line, blob) = split_line(rest).ok_or_else(|| bad("missing header"))?;
    let header: Header =
        serde_json::from_slice(header_line).map_err(|e| Error::json("checkpoint header", e))?;
    if header.dtype != "f32-le" {
        return Err(bad(&format!("unsupported dtype {}", header.dtype)));
    }
    if header.tied_embeddings {
        return Err(bad("tied embeddings are not supported"));
    }
    if header.blob_bytes != blob.len() as u64 {
        return Err(bad(&format!(
            "blob holds {} bytes, header declares {}",
            blob.len(),
            header.blob_bytes
        )));
    }
    let config = header.config;
    config.validate()?;

    let mut tensors: HashMap<String, Tensor> = HashMap::new();
    for entry in header.tensors {
        let want = ModelWeights::expected_shape(&config, &entry.name)
            .ok_or_else(|| bad(&format!("unknown tensor {}", entry.name)))?;
        if want != entry.shape {
            return Err(bad(&format!(
                "{} has shape {:?}, config implies {want:?}",
                entry.name, entry.shape
            )));
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 4 * n;
        let raw = blob
            .get(start..end)
            .ok_or_else(|| bad(&format!("{} runs past the blob", entry.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if tensors.insert(entry.name.clone(), Tensor::new(entry.shape, data)?).is_some() {
            return Err(bad(&format!("duplicate tensor {}", entry.name)));
        }
    }

    let mut take = |name: String| {
        tensors
            .remove(&name)
            .ok_or_else(|| bad(&format!("missing tensor {name}")))
    };
    let tok_embed = take("embed.tok".into())?;
    let pos_embed = take("embed.pos".into())?;
    let mut layers = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        let mut heads = Vec::with_capacity(config.heads_per_layer);
        for h in 0..config.heads_per_layer {
            heads.push(HeadWeights {
                wq: take(format!("layer.{l}.head.{h}.wq"))?,
                wk: take(format!("layer.{l}.head.{h}.wk"))?,
                wv: take(format!("layer.{l}.head.{h}.wv"))?,
            });
        }
        layers.push(LayerWeights {
            heads,
            wo: take(format!("layer.{l}.wo"))?,
            ln1_gain: take(format!("layer.{l}.ln1.gain"))?,
            ln1_bias: take(format!("layer.{l}.ln1.bias"))?,
            w1: take(format!("layer.{l}.ffn.w1"))?,
            w2: take(format!("layer.{l}.ffn.w2"))?,
            ln2_gain: take(format!("layer.{l}.ln2.gain"))?,
            ln2_bias: take(format!("layer.{l}.ln2.bias"))?,
        });
    }
    let weights = ModelWeights {
        config,
        tok_embed,
        pos_embed,
        layers,
        final_ln_gain: take("final.ln.gain".into())?,
        final_ln_bias: take("final.ln.bias".into())?,
        final_proj: take("final.proj".into())?,
    };
    weights.validate()?;
    Ok(weights)
}

pub fn read_checkpoint(path: &Path) -> Result<ModelWeights> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Hex SHA-256 of the checkpoint file bytes.
pub fn checkpoint_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
