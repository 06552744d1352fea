//! Binary checkpoints: `DITCKPT1`, a little-endian `u32` header length, a
//! JSON header (config plus parameter names and shapes in order), then every
//! parameter as little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dit::{DitConfig, DitWeights};
use crate::error::Result;

pub const MAGIC: &[u8; 8] = b"DITCKPT1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes {0:?}")]
    Magic(Vec<u8>),

    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("checkpoint parameter `{name}` has shape {found:?}, config implies {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("malformed checkpoint header: {0}")]
    Header(String),
}

#[derive(Serialize, Deserialize)]
struct ParamInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: DitConfig,
    params: Vec<ParamInfo>,
}

pub fn encode(weights: &DitWeights) -> Result<Vec<u8>> {
    let params = weights.params();
    let header = Header {
        config: weights.config.clone(),
        params: params
            .iter()
            .map(|(name, t)| ParamInfo {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let body: usize = params.iter().map(|(_, t)| t.len() * 8).sum();
    let mut out = Vec::with_capacity(12 + json.len() + body);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &params {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<DitWeights> {
    if bytes.len() < MAGIC.len() || &bytes[..8] != MAGIC {
        return Err(CheckpointError::Magic(bytes[..bytes.len().min(8)].to_vec()).into());
    }
    if bytes.len() < 12 {
        return Err(CheckpointError::Truncated {
            expected: 12,
            found: bytes.len(),
        }
        .into());
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body_start = 12 + header_len;
    if bytes.len() < body_start {
        return Err(CheckpointError::Truncated {
            expected: body_start,
            found: bytes.len(),
        }
        .into());
    }
    let header: Header = serde_json::from_slice(&bytes[12..body_start])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    header
        .config
        .validate()
        .map_err(|e| CheckpointError::Header(e.to_string()))?;

    let mut weights = DitWeights::zeros(&header.config);
    let expected = weights.params();
    if expected.len() != header.params.len() {
        return Err(CheckpointError::Header(format!(
            "{} parameters listed, config implies {}",
            header.params.len(),
            expected.len()
        ))
        .into());
    }
    for ((name, t), info) in expected.iter().zip(&header.params) {
        if *name != info.name {
            return Err(CheckpointError::Header(format!("expected parameter `{name}`, found `{}`", info.name)).into());
        }
        if t.shape() != info.shape.as_slice() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: t.shape().to_vec(),
                found: info.shape.clone(),
            }
            .into());
        }
    }
    let declared: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    let total = body_start + declared * 8;
    if bytes.len() != total {
        return Err(CheckpointError::Truncated {
            expected: total,
            found: bytes.len(),
        }
        .into());
    }

    let mut chunks = bytes[body_start..].chunks_exact(8);
    weights.visit_mut(|_, t| {
        for v in t.data_mut() {
            *v = f64::from_le_bytes(chunks.next().expect("length checked").try_into().expect("8 bytes"));
        }
    });
    Ok(weights)
}

pub fn save_checkpoint(weights: &DitWeights, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(weights)?;
    super::write_bytes(path.as_ref(), &bytes)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<DitWeights> {
    decode(&fs::read(path)?)
}
