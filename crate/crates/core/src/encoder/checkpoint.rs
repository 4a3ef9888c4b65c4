//! Checkpoint directory layout:
//!
//! - `manifest.json`: format tag, encoder config, caller metadata, and a
//!   `name -> (shape, byte_offset)` index into `params.bin`
//! - `params.bin`: every tensor as little-endian `f64`, concatenated
//! - `vocab.tsv`: `token TAB id`, specials first

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{EncoderConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::tokenize::Vocab;

pub const CHECKPOINT_FORMAT: &str = "dualcls-checkpoint-v1";
const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.bin";
const VOCAB: &str = "vocab.tsv";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    encoder: EncoderConfig,
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    byte_offset: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocab: Vocab,
    /// Opaque caller data, e.g. the training configuration.
    pub metadata: serde_json::Value,
}

pub fn save_checkpoint(
    dir: &Path,
    params: &ModelParams,
    vocab: &Vocab,
    metadata: &serde_json::Value,
) -> Result<()> {
    if vocab.len() != params.config().vocab_size {
        return Err(Error::CheckpointMismatch(format!(
            "vocabulary has {} tokens but encoder.vocab_size is {}",
            vocab.len(),
            params.config().vocab_size
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::with_capacity(params.count() * 8);
    let mut tensors = Vec::new();
    for (name, t) in params.names().iter().zip(params.tensors()) {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            byte_offset: bytes.len(),
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.to_string(),
        encoder: params.config().clone(),
        metadata: metadata.clone(),
        tensors,
    };
    let path = dir.join(PARAMS);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    vocab.save(&dir.join(VOCAB))?;
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Loads a checkpoint; with `expected` set, its encoder config must match exactly.
pub fn load_checkpoint(dir: &Path, expected: Option<&EncoderConfig>) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::CheckpointMismatch(format!(
            "unsupported format {:?}",
            manifest.format
        )));
    }
    if let Some(exp) = expected {
        if *exp != manifest.encoder {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint encoder config {:?} differs from expected {:?}",
                manifest.encoder, exp
            )));
        }
    }
    let path = dir.join(PARAMS);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mut named = Vec::with_capacity(manifest.tensors.len());
    for entry in manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let end = entry.byte_offset + n * 8;
        let raw = bytes.get(entry.byte_offset..end).ok_or_else(|| {
            Error::CheckpointMismatch(format!("tensor {} runs past end of {PARAMS}", entry.name))
        })?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        named.push((entry.name, Tensor::from_vec(&entry.shape, data)?));
    }
    let params = ModelParams::from_named(manifest.encoder, named)?;
    let vocab = Vocab::load(&dir.join(VOCAB))?;
    if vocab.len() != params.config().vocab_size {
        return Err(Error::CheckpointMismatch(format!(
            "vocabulary has {} tokens but encoder.vocab_size is {}",
            vocab.len(),
            params.config().vocab_size
        )));
    }
    Ok(Checkpoint {
        params,
        vocab,
        metadata: manifest.metadata,
    })
}
