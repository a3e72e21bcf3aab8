//! Self-describing checkpoint container.
//!
//! Layout: the 8-byte magic `BSCKPT\0\x01`, a little-endian `u64` header
//! length, a JSON header (kind, config, seed, training step, free-form
//! metadata and a tensor table), then every tensor as little-endian `f32`
//! in table order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

const MAGIC: &[u8; 8] = b"BSCKPT\0\x01";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub step: u64,
    pub metadata: serde_json::Value,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    config: serde_json::Value,
    seed: u64,
    step: u64,
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let tensors = self
            .params
            .params
            .iter()
            .map(|p| {
                let e = TensorEntry {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    offset,
                    len: p.value.len(),
                };
                offset += p.value.len();
                e
            })
            .collect();
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            seed: self.seed,
            step: self.step,
            metadata: self.metadata.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params.params {
            for v in &p.value {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing checkpoint magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let data = &bytes[16 + hlen..];
        let total: usize = header.tensors.iter().map(|t| t.len).sum();
        if data.len() != total * 4 {
            return Err(bad("tensor data length does not match header"));
        }
        let mut params = ParamStore::default();
        for t in header.tensors {
            if t.shape.iter().product::<usize>() != t.len {
                return Err(Error::Checkpoint(format!(
                    "tensor {} shape/len mismatch",
                    t.name
                )));
            }
            let raw = data
                .get(4 * t.offset..4 * (t.offset + t.len))
                .ok_or_else(|| bad("tensor offset out of range"))?;
            let value = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            params.push(t.name, t.shape, value);
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            seed: header.seed,
            step: header.step,
            metadata: header.metadata,
            params,
        })
    }

    /// Writes to a sibling temporary file and renames it into place, so a
    /// reader never observes a partially written checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn typed_config<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp-{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

/// Hex SHA-256 of a file's contents.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::default();
        params.push("w", vec![2, 2], vec![1.0, -0.5, 0.25, 3.0]);
        params.push("b", vec![2], vec![0.0, 1.5]);
        Checkpoint {
            kind: "test".into(),
            config: serde_json::json!({"a": 1}),
            seed: 9,
            step: 120,
            metadata: serde_json::json!({"loss": [0.5, 0.25]}),
            params,
        }
    }

    #[test]
    fn round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        let ck = sample();
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), ck);
        // no temp files left behind
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(Checkpoint::from_bytes(b"not a checkpoint at all").is_err());
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn kind_check() {
        assert!(sample().expect_kind("test").is_ok());
        assert!(sample().expect_kind("high").is_err());
    }
}
