// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary checkpoint files.
//!
//! Layout: the 7-byte magic `MILAB1\0`, a little-endian `u32` header length,
//! a JSON header, the parameters as little-endian `f64` in canonical order,
//! and the 32-byte SHA-256 digest of that payload. Optimizer moments are not
//! stored; resuming starts a fresh optimizer.

use std::fs;
use std::path::Path;

use milab_tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{param_shapes, ModelConfig, TransformerModel, Weights};
use crate::train::Hyper;

pub const MAGIC: &[u8; 7] = b"MILAB1\0";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub tag: String,
    /// Payload hash of the checkpoint this one was trained from.
    pub parent: Option<String>,
    pub epoch: usize,
}

impl Lineage {
    pub fn root(tag: &str) -> Self {
        Lineage { tag: tag.to_string(), parent: None, epoch: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub hyper: Option<Hyper>,
    pub lineage: Lineage,
    pub manifest: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub model: TransformerModel,
    /// Hex SHA-256 of the payload.
    pub hash: String,
}

/// Hex SHA-256 of a model's parameter payload.
pub fn model_hash(model: &TransformerModel) -> String {
    hex::encode(Sha256::digest(model.payload()))
}

pub fn to_bytes(model: &TransformerModel, hyper: Option<&Hyper>, lineage: &Lineage) -> Result<Vec<u8>> {
    let w = model.weights();
    let mut offset = 0;
    let manifest = w
        .names()
        .into_iter()
        .zip(w.tensors())
        .map(|(name, t)| {
            let e = ManifestEntry { name, shape: t.shape().to_vec(), offset };
            offset += t.numel() * 8;
            e
        })
        .collect();
    let header = Header { config: model.config().clone(), hyper: hyper.cloned(), lineage: lineage.clone(), manifest };
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
    let payload = model.payload();
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + payload.len() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&Sha256::digest(&payload));
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic);
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 4 {
        return Err(Error::Truncated("missing header length".into()));
    }
    let len = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
    let rest = &rest[4..];
    if rest.len() < len {
        return Err(Error::Truncated("header shorter than declared".into()));
    }
    let header: Header =
        serde_json::from_slice(&rest[..len]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    header.config.validate()?;
    let shapes = param_shapes(&header.config);
    if header.manifest.len() != shapes.len() {
        return Err(Error::Checkpoint("manifest does not match config".into()));
    }
    let mut expected_offset = 0;
    for (entry, shape) in header.manifest.iter().zip(&shapes) {
        if &entry.shape != shape || entry.offset != expected_offset {
            return Err(Error::Checkpoint(format!("manifest entry {} is inconsistent", entry.name)));
        }
        expected_offset += shape.iter().product::<usize>() * 8;
    }
    let rest = &rest[len..];
    if rest.len() < expected_offset + 32 {
        return Err(Error::Truncated(format!(
            "payload needs {} bytes plus digest, found {}",
            expected_offset,
            rest.len()
        )));
    }
    if rest.len() > expected_offset + 32 {
        return Err(Error::Checkpoint("trailing bytes after digest".into()));
    }
    let (payload, digest) = rest.split_at(expected_offset);
    let actual = hex::encode(Sha256::digest(payload));
    let expected = hex::encode(digest);
    if actual != expected {
        return Err(Error::HashMismatch { expected, actual });
    }
    let tensors = header
        .manifest
        .iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let data = payload[e.offset..e.offset + n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Ok(Tensor::new(e.shape.clone(), data)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let weights = Weights::from_flat(tensors, header.config.n_layers)?;
    let model = TransformerModel::from_weights(header.config.clone(), weights)?;
    Ok(Checkpoint { header, model, hash: actual })
}

/// Writes a checkpoint and returns its payload hash.
pub fn save(model: &TransformerModel, hyper: Option<&Hyper>, lineage: &Lineage, path: &Path) -> Result<String> {
    fs::write(path, to_bytes(model, hyper, lineage)?)?;
    Ok(model_hash(model))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}
