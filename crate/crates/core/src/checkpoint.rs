//! Self-describing binary checkpoints: a versioned magic number, a JSON
//! header (caller metadata plus the tensor directory), then each tensor as
//! little-endian f32 in directory order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::ParamStore;
use crate::{Error, Matrix, Result, Scalar};

const MAGIC: &[u8; 8] = b"MRCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Matrix<f32>)>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    /// Appends every tensor of `store` with `prefix` prepended to its name.
    pub fn add_store<T: Scalar>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (n, t) in store.names().iter().zip(store.tensors()) {
            self.tensors.push((format!("{prefix}{n}"), t.cast()));
        }
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn store<T: Scalar>(&self, prefix: &str) -> ParamStore<T> {
        let mut s = ParamStore::default();
        for (n, t) in &self.tensors {
            if let Some(rest) = n.strip_prefix(prefix) {
                s.push(rest, t.cast());
            }
        }
        s
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n.starts_with(prefix))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            version: VERSION,
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
        };
        let h = serde_json::to_vec(&header).expect("header serializes");
        let body: usize = self.tensors.iter().map(|(_, t)| t.len() * 4).sum();
        let mut out = Vec::with_capacity(20 + h.len() + body);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(h.len() as u64).to_le_bytes());
        out.extend_from_slice(&h);
        for (_, t) in &self.tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic number"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let hbytes = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(hbytes)?;
        let mut off = 20 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n = e.rows * e.cols;
            let chunk = bytes.get(off..off + 4 * n).ok_or_else(|| bad("truncated tensor data"))?;
            let data = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.push((e.name, Matrix::from_vec(e.rows, e.cols, data)));
            off += 4 * n;
        }
        if off != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}
