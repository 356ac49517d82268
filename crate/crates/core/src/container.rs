//! Self-describing tensor container shared by adapter and backbone
//! checkpoints.
//!
//! Layout: magic `RSTL`, `u16` version, `u32` header length, a JSON header
//! `{kind, meta, tensors: [{name, shape}]}`, then every tensor as
//! little-endian `f32` in header order, row-major.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CONTAINER_MAGIC: &[u8; 4] = b"RSTL";
pub const CONTAINER_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Array2<f32>)>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Container {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, tensor: &Array2<T>) {
        let t = tensor.mapv(|v| v.to_f32().unwrap_or(f32::NAN));
        self.tensors.push((name.into(), t));
    }

    pub fn get<T: Scalar>(&self, name: &str) -> Option<Array2<T>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.mapv(|v| T::from_f64_lossy(f64::from(v))))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: [t.nrows(), t.ncols()],
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("container header serializes");
        let mut out = Vec::with_capacity(10 + header.len());
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 10 || &bytes[..4] != CONTAINER_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CONTAINER_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(10..10 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        let mut offset = 10 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let count = entry.shape[0] * entry.shape[1];
            let raw = bytes
                .get(offset..offset + count * 4)
                .ok_or_else(|| bad(&format!("truncated tensor `{}`", entry.name)))?;
            offset += count * 4;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Array2::from_shape_vec((entry.shape[0], entry.shape[1]), data)
                .map_err(|e| bad(&e.to_string()))?;
            tensors.push((entry.name, t));
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Container {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip() {
        let mut c = Container::new("test", serde_json::json!({"x": 1}));
        c.push("a", &array![[1.5f32, -2.0], [0.1, 3.0]]);
        c.push("b", &array![[0.25f64]]);
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
