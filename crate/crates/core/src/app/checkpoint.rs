//! Binary checkpoint: magic `COFO`, format version (u32 LE), manifest
//! length (u64 LE), a JSON manifest, then the parameters as LE `f32`.
//!
//! Record offsets and counts are in `f32` elements from the start of the
//! payload. Records are stored in parameter-name order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{ParameterStore, Tensor};

pub const MAGIC: &[u8; 4] = b"COFO";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: ModelConfig,
    records: Vec<Record>,
}

/// A model as stored on disk. Parameters hold `f32`-representable values.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
}

impl Checkpoint {
    /// Rounds the parameters to storage precision.
    pub fn new(model: &Model) -> Self {
        Self {
            model: Model {
                config: model.config.clone(),
                params: model.params.round_to_f32(),
            },
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut records = Vec::new();
        let mut offset = 0;
        for (name, t) in self.model.params.iter() {
            records.push(Record {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
                count: t.len(),
            });
            offset += t.len();
        }
        let manifest = serde_json::to_vec(&Manifest {
            config: self.model.config.clone(),
            records,
        })?;
        let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in self.model.params.iter() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::NotACheckpoint);
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::TruncatedPayload);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let payload_start = usize::try_from(manifest_len)
            .ok()
            .and_then(|l| HEADER_LEN.checked_add(l))
            .filter(|&end| end <= bytes.len())
            .ok_or(Error::TruncatedPayload)?;
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..payload_start])
            .map_err(|e| Error::Manifest(e.to_string()))?;
        let payload = &bytes[payload_start..];
        let available = payload.len() / 4;

        let mut params = ParameterStore::new();
        let mut expected_offset = 0;
        for r in &manifest.records {
            if r.dtype != "f32" {
                return Err(Error::Manifest(format!(
                    "{}: unsupported dtype {}",
                    r.name, r.dtype
                )));
            }
            if r.shape.iter().product::<usize>() != r.count {
                return Err(Error::Manifest(format!(
                    "{}: shape {:?} holds {} values",
                    r.name, r.shape, r.count
                )));
            }
            if r.offset != expected_offset {
                return Err(Error::Manifest(format!(
                    "{}: offset {} is not contiguous",
                    r.name, r.offset
                )));
            }
            let end = r
                .offset
                .checked_add(r.count)
                .ok_or(Error::TruncatedPayload)?;
            if end > available {
                return Err(Error::TruncatedPayload);
            }
            let data = payload[4 * r.offset..4 * end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            params
                .insert(r.name.clone(), Tensor::new(r.shape.clone(), data)?)
                .map_err(|e| Error::Manifest(e.to_string()))?;
            expected_offset = end;
        }
        if payload.len() != 4 * expected_offset {
            return Err(Error::Manifest(format!(
                "payload holds {} bytes, manifest covers {}",
                payload.len(),
                4 * expected_offset
            )));
        }
        let model = Model::from_parts(manifest.config, params)
            .map_err(|e| Error::Manifest(e.to_string()))?;
        Ok(Self { model })
    }
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let ckpt = Checkpoint::new(model);
    std::fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))?;
    Ok(ckpt)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
