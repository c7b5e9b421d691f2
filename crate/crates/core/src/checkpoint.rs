//! Named-tensor container used for checkpoints and sampled latents.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content                                   |
//! |-------|-------------------------------------------|
//! | 8     | magic `RFLWTNSR`                          |
//! | 4     | format version (`u32`, currently 1)       |
//! | 8     | header length `H` (`u64`)                 |
//! | H     | UTF-8 JSON header                         |
//! | ...   | payload: every tensor's `f64` values, row-major, in header order |
//!
//! The header holds `kind`, `config` (any JSON), `config_hash` (SHA-256 of
//! the config's compact JSON with sorted keys), free-form `metadata`,
//! the tensor index (`name`, `shape`) and `payload_sha256`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"RFLWTNSR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a tensor container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("truncated container: {0}")]
    Truncated(&'static str),
    #[error("corrupted header: {0}")]
    Header(String),
    #[error("payload checksum mismatch")]
    Checksum,
    #[error("config hash mismatch: file {file}, expected {expected}")]
    ConfigHash { file: String, expected: String },
    #[error("expected container kind {expected:?}, found {found:?}")]
    Kind { expected: String, found: String },
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("invalid tensor {name:?}: {reason}")]
    Tensor { name: String, reason: String },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    config: Value,
    config_hash: String,
    metadata: BTreeMap<String, Value>,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// In-memory contents of a container file.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub config: Value,
    pub metadata: BTreeMap<String, Value>,
    pub tensors: Vec<(String, Tensor)>,
}

/// SHA-256 of a JSON value's compact, key-sorted encoding.
pub fn config_hash(config: &Value) -> String {
    let canonical = serde_json::to_string(config).expect("json value serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

impl Container {
    pub fn new(kind: &str, config: Value) -> Self {
        Self {
            kind: kind.to_string(),
            config,
            metadata: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn config_hash(&self) -> String {
        config_hash(&self.config)
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), CheckpointError> {
        if self.kind != kind {
            return Err(CheckpointError::Kind {
                expected: kind.to_string(),
                found: self.kind.clone(),
            });
        }
        Ok(())
    }

    pub fn expect_config_hash(&self, expected: &str) -> Result<(), CheckpointError> {
        let file = self.config_hash();
        if file != expected {
            return Err(CheckpointError::ConfigHash {
                file,
                expected: expected.to_string(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        for (_, t) in &self.tensors {
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            config_hash: self.config_hash(),
            metadata: self.metadata.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 20 {
            return Err(CheckpointError::Truncated("preamble"));
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let hlen = usize::try_from(hlen).map_err(|_| CheckpointError::Truncated("header"))?;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(CheckpointError::Truncated("header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| CheckpointError::Header(e.to_string()))?;
        if header.config_hash != config_hash(&header.config) {
            return Err(CheckpointError::Header("config hash does not match embedded config".into()));
        }
        let payload = &body[hlen..];
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(CheckpointError::Checksum);
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let end = offset + n * 8;
            if end > payload.len() {
                return Err(CheckpointError::Truncated("payload"));
            }
            let data = payload[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            offset = end;
            let t = Tensor::new(entry.shape, data).map_err(|e| CheckpointError::Tensor {
                name: entry.name.clone(),
                reason: e.to_string(),
            })?;
            tensors.push((entry.name, t));
        }
        if offset != payload.len() {
            return Err(CheckpointError::Header("payload longer than tensor index".into()));
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
