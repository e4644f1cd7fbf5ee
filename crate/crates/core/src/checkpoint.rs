//! Binary checkpoint container.
//!
//! Layout: magic `PVXL`, format version (u32 LE), manifest length (u64 LE),
//! the UTF-8 JSON manifest, raw little-endian tensor payloads, and the CRC32
//! of the payload (u32 LE). The manifest lists every tensor's name, shape,
//! dtype and payload offset next to free-form metadata.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PVXL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

/// Parameters plus metadata (configuration, run manifest).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub params: ParamSet,
}

fn format_error(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "checkpoint",
        offset: offset as u64,
        detail: detail.into(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::with_capacity(self.params.numel() * 8);
        let mut tensors = Vec::with_capacity(self.params.len());
        for (name, t) in self.params.iter() {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                offset: payload.len() as u64,
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = serde_json::to_vec(&Manifest {
            tensors,
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + manifest.len() + payload.len() + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 + 4 {
            return Err(format_error(bytes.len(), "file shorter than the fixed header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(format_error(0, "bad magic, expected PVXL"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(format_error(4, format!("unsupported format version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload_start = 16usize
            .checked_add(mlen)
            .filter(|&e| e + 4 <= bytes.len())
            .ok_or_else(|| format_error(8, format!("manifest length {mlen} exceeds file size")))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..payload_start])
            .map_err(|e| format_error(16, format!("manifest: {e}")))?;
        let payload = &bytes[payload_start..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut params = ParamSet::new();
        let mut expected = 0usize;
        for e in manifest.tensors {
            if e.dtype != "f64" {
                return Err(format_error(16, format!("tensor `{}` has unsupported dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            if start != expected || start + 8 * n > payload.len() {
                return Err(format_error(payload_start + start, format!("tensor `{}` out of bounds", e.name)));
            }
            let data = payload[start..start + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.insert(e.name, Tensor::new(e.shape, data)?);
            expected = start + 8 * n;
        }
        if expected != payload.len() {
            return Err(format_error(payload_start + expected, "unreferenced payload bytes"));
        }
        Ok(Checkpoint {
            meta: manifest.meta,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
