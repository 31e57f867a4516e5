//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes          | content                                        |
//! |----------------|------------------------------------------------|
//! | 0..8           | magic `P2PCKPT\0`                              |
//! | 8..12          | `u32` format version (1)                       |
//! | 12..20         | `u64` manifest length `n`                      |
//! | 20..20+n       | UTF-8 JSON manifest                            |
//! | 20+n..         | tensors as raw IEEE-754 `f64`, manifest order  |
//!
//! The manifest is `{"metadata": <any JSON>, "tensors": [{"name", "shape",
//! "dtype": "f64le", "trainable"}]}`. Identical parameters and metadata
//! always produce identical bytes.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"P2PCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint<W: Write>(mut w: W, store: &ParamStore, metadata: &serde_json::Value) -> Result<()> {
    let manifest = Manifest {
        metadata: metadata.clone(),
        tensors: store
            .iter()
            .map(|(_, p)| TensorEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                dtype: "f64le".into(),
                trainable: p.trainable,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, p) in store.iter() {
        let mut buf = Vec::with_capacity(p.tensor.numel() * 8);
        for v in p.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ParamStore, serde_json::Value)> {
    let mut head = [0u8; 20];
    r.read_exact(&mut head)?;
    if &head[..8] != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(head[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(head[12..20].try_into().unwrap()) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let manifest: Manifest = serde_json::from_slice(&json).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let mut store = ParamStore::new();
    for entry in manifest.tensors {
        if entry.dtype != "f64le" {
            return Err(NnError::Checkpoint(format!("unsupported dtype {}", entry.dtype)));
        }
        let n: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.add(entry.name, Tensor::new(&entry.shape, data)?, entry.trainable)?;
    }
    Ok((store, manifest.metadata))
}

pub fn save(path: impl AsRef<Path>, store: &ParamStore, metadata: &serde_json::Value) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(&mut w, store, metadata)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(ParamStore, serde_json::Value)> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Copies values from `src` into the same-named, same-shaped parameters of
/// `dst`. Every parameter of `dst` must be present.
pub fn load_into(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    for id in dst.ids().collect::<Vec<_>>() {
        let name = dst.get(id).name.clone();
        let sid = src.id(&name).ok_or_else(|| NnError::UnknownParam(name.clone()))?;
        let st = src.tensor(sid);
        let dt = &mut dst.get_mut(id).tensor;
        if st.shape() != dt.shape() {
            return Err(NnError::Checkpoint(format!(
                "`{name}` has shape {:?} in checkpoint, {:?} in model",
                st.shape(),
                dt.shape()
            )));
        }
        dt.data_mut().copy_from_slice(st.data());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_stable() {
        let mut store = ParamStore::new();
        store
            .add(
                "a.w",
                Tensor::new(&[2, 2], vec![1.0, -0.5, 3.25, f64::MIN_POSITIVE]).unwrap(),
                true,
            )
            .unwrap();
        store.add("a.running_mean", Tensor::zeros(&[2]), false).unwrap();
        let meta = serde_json::json!({"variant": "p2p_point", "n": 3});
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &store, &meta).unwrap();
        let (back, meta2) = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(meta, meta2);
        let mut again = Vec::new();
        write_checkpoint(&mut again, &back, &meta2).unwrap();
        assert_eq!(bytes, again);
        assert!(!back.get(back.id("a.running_mean").unwrap()).trainable);
    }

    #[test]
    fn rejects_bad_magic() {
        let err = read_checkpoint(&[0u8; 32][..]).unwrap_err();
        assert!(matches!(err, NnError::Checkpoint(_)));
    }
}
