//! Versioned binary container for named tensor stores plus a JSON header.
//!
//! Layout: magic (8 bytes), format version (u32 LE), header length (u64 LE),
//! UTF-8 JSON header, then every tensor's values as f64 LE in header order.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::TensorStore;

pub const MAGIC: &[u8; 8] = b"NWCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoreEntry {
    name: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    stores: Vec<StoreEntry>,
}

/// Named tensor stores with free-form metadata.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub stores: Vec<(String, TensorStore)>,
}

impl Checkpoint {
    pub fn store(&self, name: &str) -> Result<&TensorStore> {
        self.stores
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::Checkpoint(format!("missing store `{name}`")))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            meta: self.meta.clone(),
            stores: self
                .stores
                .iter()
                .map(|(name, s)| StoreEntry {
                    name: name.clone(),
                    tensors: s
                        .names()
                        .iter()
                        .zip(s.values())
                        .map(|(n, v)| TensorEntry {
                            name: n.clone(),
                            shape: v.shape().to_vec(),
                        })
                        .collect(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, s) in &self.stores {
            for v in s.values() {
                let mut buf = Vec::with_capacity(v.len() * 8);
                for x in v.iter() {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
                w.write_all(&buf)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("truncated file".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let len = u64::from_le_bytes(b8) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)
            .map_err(|_| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&json)?;
        let mut stores = Vec::with_capacity(header.stores.len());
        for entry in header.stores {
            let mut store = TensorStore::new();
            for t in entry.tensors {
                let n: usize = t.shape.iter().product();
                let mut raw = vec![0u8; n * 8];
                r.read_exact(&mut raw)
                    .map_err(|_| Error::Checkpoint(format!("truncated data for `{}`", t.name)))?;
                let data: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                let arr = ArrayD::from_shape_vec(IxDyn(&t.shape), data)
                    .map_err(|e| Error::Checkpoint(e.to_string()))?;
                store.push(t.name, arr);
            }
            stores.push((entry.name, store));
        }
        Ok(Self {
            meta: header.meta,
            stores,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Copies values from `src` into `dst`, requiring identical names and shapes.
pub fn restore_store(dst: &mut TensorStore, src: &TensorStore) -> Result<()> {
    if dst.names() != src.names() {
        return Err(Error::Checkpoint("tensor names do not match the model layout".into()));
    }
    dst.assign(src.values().to_vec()).map_err(Error::Checkpoint)
}
