//! Self-describing tensor container shared by encoder checkpoints,
//! classifier checkpoints and window exports.
//!
//! Layout: an 8-byte little-endian header length, a UTF-8 JSON header, then
//! the raw tensor payload. Each header tensor entry records its name, shape
//! and byte offset into the payload; values are row-major little-endian
//! `f32`.

use std::fs;
use std::path::Path;

use gradtape::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: &str = "unimotion-ckpt-v1";

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub config: Value,
    pub metadata: Value,
    pub tensors: Vec<StoredTensor>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: String,
    kind: String,
    config: Value,
    metadata: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

impl Container {
    pub fn new(kind: &str, config: Value, metadata: Value) -> Self {
        Self {
            kind: kind.to_string(),
            config,
            metadata,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(StoredTensor {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        });
    }

    pub fn tensor(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&StoredTensor> {
        self.tensor(name)
            .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing tensor {name}")))
    }

    /// Appends every tensor of `store` as `{group}/{name}`.
    pub fn push_store(&mut self, group: &str, store: &ParamStore<f32>) {
        for (_, name, t) in store.iter() {
            self.push(format!("{group}/{name}"), t.shape(), t.data().to_vec());
        }
    }

    /// Overwrites every tensor of `store` from `{group}/{name}`, checking shapes.
    pub fn fill_store(&self, group: &str, store: &mut ParamStore<f32>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let key = format!("{group}/{}", store.name(id));
            let stored = self.require(&key)?;
            let target = store.get_mut(id);
            if stored.shape != target.shape() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "{key}: stored shape {:?}, model expects {:?}",
                    stored.shape,
                    target.shape()
                )));
            }
            *target = Tensor::new(&stored.shape, stored.data.clone());
        }
        Ok(())
    }

    pub fn push_tensors(&mut self, group: &str, names: &ParamStore<f32>, tensors: &[Tensor<f32>]) {
        for ((_, name, _), t) in names.iter().zip(tensors) {
            self.push(format!("{group}/{name}"), t.shape(), t.data().to_vec());
        }
    }

    pub fn read_tensors(&self, group: &str, names: &ParamStore<f32>) -> Result<Vec<Tensor<f32>>> {
        names
            .iter()
            .map(|(_, name, t)| {
                let key = format!("{group}/{name}");
                let stored = self.require(&key)?;
                if stored.shape != t.shape() {
                    return Err(Error::IncompatibleCheckpoint(format!("{key}: shape mismatch")));
                }
                Ok(Tensor::new(&stored.shape, stored.data.clone()))
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|t| {
                let e = TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    offset,
                };
                offset += t.data.len() * 4;
                e
            })
            .collect();
        let header = Header {
            version: CHECKPOINT_VERSION.into(),
            kind: self.kind.clone(),
            config: self.config.clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::IncompatibleCheckpoint(m.to_string());
        if bytes.len() < 8 {
            return Err(bad("truncated header length"));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let payload_start = 8usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[8..payload_start])?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::IncompatibleCheckpoint(format!(
                "version {:?}, expected {CHECKPOINT_VERSION:?}",
                header.version
            )));
        }
        let payload = &bytes[payload_start..];
        let tensors = header
            .tensors
            .into_iter()
            .map(|e| {
                let n: usize = e.shape.iter().product();
                let end = e.offset + n * 4;
                if end > payload.len() {
                    return Err(Error::IncompatibleCheckpoint(format!(
                        "tensor {} runs past end of file",
                        e.name
                    )));
                }
                let data = payload[e.offset..end]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Ok(StoredTensor {
                    name: e.name,
                    shape: e.shape,
                    data,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            kind: header.kind,
            config: header.config,
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized bytes, as lowercase hex.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(Sha256::digest(self.to_bytes()?).iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }
}
