//! Binary checkpoint format.
//!
//! Layout: the magic `CGH`, one version byte, a little-endian `u32` length,
//! that many bytes of JSON descriptor, then every parameter tensor as
//! little-endian `f64` values in declaration order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, Model, Network, ParamShape};
use crate::error::{Error, Result};
use crate::tensor::Rng;

const MAGIC: &[u8; 3] = b"CGH";
pub const CHECKPOINT_VERSION: u8 = b'1';

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub epochs: usize,
    pub l2_strength: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Descriptor {
    arch: ArchConfig,
    metadata: TrainingMetadata,
    params: Vec<ParamShape>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub metadata: TrainingMetadata,
}

pub fn save_bytes(model: &Model, metadata: &TrainingMetadata) -> Vec<u8> {
    let desc = Descriptor {
        arch: model.arch().clone(),
        metadata: metadata.clone(),
        params: model.descriptor().params,
    };
    let json = serde_json::to_vec(&desc).expect("descriptor serializes");
    let mut out = Vec::with_capacity(8 + json.len() + 8 * super::count_parameters(model));
    out.extend_from_slice(MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(model: &Model, metadata: &TrainingMetadata, path: &Path) -> Result<()> {
    std::fs::write(path, save_bytes(model, metadata)).map_err(|e| Error::io(path, e))
}

pub fn load_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..3] != MAGIC {
        return Err(Error::CorruptCheckpoint("missing CGH magic".into()));
    }
    if bytes[3] != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: bytes[3] as char,
            supported: CHECKPOINT_VERSION as char,
        });
    }
    let len_bytes: [u8; 4] = bytes
        .get(4..8)
        .and_then(|s| s.try_into().ok())
        .ok_or_else(|| Error::CorruptCheckpoint("truncated descriptor length".into()))?;
    let len = u32::from_le_bytes(len_bytes) as usize;
    let json = bytes
        .get(8..8 + len)
        .ok_or_else(|| Error::CorruptCheckpoint(format!("descriptor of {len} bytes is truncated")))?;
    let desc: Descriptor =
        serde_json::from_slice(json).map_err(|e| Error::CorruptCheckpoint(format!("bad descriptor: {e}")))?;

    let mut model = Model::build(&desc.arch, &mut Rng::new(0))
        .map_err(|e| Error::CorruptCheckpoint(format!("descriptor architecture rejected: {e}")))?;
    let expected = model.descriptor().params;
    if expected != desc.params {
        return Err(Error::CorruptCheckpoint(
            "parameter list does not match the described architecture".into(),
        ));
    }
    let mut body = &bytes[8 + len..];
    for p in model.params_mut() {
        let n = p.value.len() * 8;
        if body.len() < n {
            return Err(Error::CorruptCheckpoint(format!("parameter block {} is truncated", p.name)));
        }
        for (v, chunk) in p.value.data_mut().iter_mut().zip(body[..n].chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
        }
        body = &body[n..];
    }
    if !body.is_empty() {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", body.len())));
    }
    Ok(Checkpoint {
        model,
        metadata: desc.metadata,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_bytes(&bytes).map_err(|e| e.context(format!("loading {}", path.display())))
}
