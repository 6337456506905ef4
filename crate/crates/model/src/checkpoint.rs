//! Checkpoint files: magic, header length, JSON header, little-endian f64
//! parameter blob.

use std::path::Path;

use evstream_core::config::ModelConfig;
use evstream_core::represent::SequenceManifest;
use evstream_core::Scalar;
use serde::{Deserialize, Serialize};

use crate::model::{Architecture, EventStreamModel, ModelError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"EVCKPT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model_config: ModelConfig,
    pub manifest_hash: String,
    pub step: u64,
    pub seed: u64,
    /// `(name, rows, cols)` of every tensor in blob order.
    pub tensors: Vec<(String, usize, usize)>,
}

fn bad(message: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(message.into())
}

pub fn to_bytes<T: Scalar>(model: &EventStreamModel<T>, manifest_hash: &str, step: u64, seed: u64) -> Vec<u8> {
    let header = CheckpointHeader {
        model_config: model.config.clone(),
        manifest_hash: manifest_hash.to_string(),
        step,
        seed,
        tensors: model
            .arch
            .params
            .iter()
            .map(|p| (p.name.clone(), p.rows, p.cols))
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let n: usize = model.params.iter().map(|p| p.len()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + 8 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &model.params {
        for v in &p.data {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

pub fn save<T: Scalar>(
    path: &Path,
    model: &EventStreamModel<T>,
    manifest_hash: &str,
    step: u64,
    seed: u64,
) -> Result<(), ModelError> {
    std::fs::write(path, to_bytes(model, manifest_hash, step, seed)).map_err(|e| ModelError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8]), ModelError> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| bad(e.to_string()))?;
    Ok((header, &bytes[16 + len..]))
}

/// Restores a model; refuses checkpoints written against another dataset.
pub fn from_bytes<T: Scalar>(
    bytes: &[u8],
    manifest: &SequenceManifest,
) -> Result<(EventStreamModel<T>, CheckpointHeader), ModelError> {
    let (header, blob) = read_header(bytes)?;
    let hash = manifest.hash();
    if header.manifest_hash != hash {
        return Err(bad(format!(
            "checkpoint was trained on dataset {} but this dataset is {hash}",
            header.manifest_hash
        )));
    }
    let arch = Architecture::new(&manifest.layout, &header.model_config)?;
    let expected: Vec<(String, usize, usize)> = arch.params.iter().map(|p| (p.name.clone(), p.rows, p.cols)).collect();
    if expected != header.tensors {
        return Err(bad("tensor shapes do not match the architecture"));
    }
    let n: usize = expected.iter().map(|(_, r, c)| r * c).sum();
    if blob.len() != 8 * n {
        return Err(bad(format!("expected {} parameter bytes, found {}", 8 * n, blob.len())));
    }
    let mut values = blob
        .chunks_exact(8)
        .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))));
    let params = expected
        .iter()
        .map(|(_, r, c)| Tensor::from_vec(*r, *c, values.by_ref().take(r * c).collect()))
        .collect();
    Ok((
        EventStreamModel {
            config: header.model_config.clone(),
            arch,
            params,
        },
        header,
    ))
}

pub fn load<T: Scalar>(
    path: &Path,
    manifest: &SequenceManifest,
) -> Result<(EventStreamModel<T>, CheckpointHeader), ModelError> {
    let bytes = std::fs::read(path).map_err(|e| ModelError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    from_bytes(&bytes, manifest)
}
