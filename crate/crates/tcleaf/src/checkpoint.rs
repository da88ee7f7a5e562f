//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"TCLEAFCK"            magic, 8 bytes
//! u32                    format version (1)
//! u64                    manifest length in bytes
//! manifest               UTF-8 JSON, see [`Manifest`]
//! f64 * total            tensor values, concatenated in manifest order
//! ```
//!
//! Each manifest entry records the tensor's name, shape, dtype and byte
//! offset relative to the start of the value section. Values are stored as
//! raw IEEE-754 bits, so a save/load round trip is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use tcleaf_core::config::ModelConfig;
use tcleaf_core::model::Detector;
use tcleaf_core::nn::ParamStore;
use tcleaf_core::tensor::Tensor;

use crate::config_file::{parse_config, write_config, RunConfig};

pub const MAGIC: &[u8; 8] = b"TCLEAFCK";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// The model configuration in the flat key = value format.
    pub config: String,
    pub tensors: Vec<Entry>,
}

fn corrupt(m: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt(m.into())
}

pub fn encode(cfg: &ModelConfig, store: &ParamStore) -> Vec<u8> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut offset = 0u64;
    for (name, t, trainable) in store.iter() {
        tensors.push(Entry { name: name.to_string(), shape: t.shape().to_vec(), dtype: "f64".into(), offset, trainable });
        offset += 8 * t.numel() as u64;
    }
    let snapshot = RunConfig { model: cfg.clone(), train: Default::default() };
    let manifest = serde_json::to_vec(&Manifest { config: write_config(&snapshot), tensors }).expect("manifest serialises");
    let mut out = Vec::with_capacity(20 + manifest.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for (_, t, _) in store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// The manifest and the decoded tensors, in file order.
pub fn decode(bytes: &[u8]) -> Result<(Manifest, Vec<Tensor>), CheckpointError> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b).map_err(|_| corrupt("truncated header"))?;
    let version = u32::from_le_bytes(u32b);
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b).map_err(|_| corrupt("truncated header"))?;
    let len = u64::from_le_bytes(u64b) as usize;
    if r.len() < len {
        return Err(corrupt("truncated manifest"));
    }
    let manifest: Manifest = serde_json::from_slice(&r[..len]).map_err(|e| corrupt(format!("manifest: {e}")))?;
    let values = &r[len..];
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    let mut expected = 0u64;
    for e in &manifest.tensors {
        if e.dtype != "f64" {
            return Err(corrupt(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        if e.offset != expected {
            return Err(corrupt(format!("{}: offset {} where {} was expected", e.name, e.offset, expected)));
        }
        let n: usize = e.shape.iter().product();
        let (start, end) = (e.offset as usize, e.offset as usize + 8 * n);
        let chunk = values.get(start..end).ok_or_else(|| corrupt(format!("{}: values truncated", e.name)))?;
        let data = chunk.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        tensors.push(Tensor::new(e.shape.clone(), data).map_err(|err| corrupt(err.to_string()))?);
        expected = end as u64;
    }
    if values.len() as u64 != expected {
        return Err(corrupt(format!("{} trailing bytes", values.len() as u64 - expected)));
    }
    Ok((manifest, tensors))
}

pub fn save(path: &Path, cfg: &ModelConfig, store: &ParamStore) -> Result<(), CheckpointError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(cfg, store))?;
    Ok(())
}

/// Rebuilds the detector described by the checkpoint and loads its weights.
/// Every stored tensor must match a parameter of that network by name and
/// shape, and every parameter must be present.
pub fn load(path: &Path) -> Result<(Detector, ParamStore), CheckpointError> {
    let bytes = std::fs::read(path)?;
    let (manifest, tensors) = decode(&bytes)?;
    let cfg = parse_config(&manifest.config, RunConfig::toy()).map_err(|e| corrupt(format!("config: {e}")))?.model;
    let (det, mut store) = Detector::new(&cfg, 0).map_err(|e| corrupt(e.to_string()))?;
    if manifest.tensors.len() != store.len() {
        return Err(corrupt(format!("{} tensors stored, network has {}", manifest.tensors.len(), store.len())));
    }
    for (e, t) in manifest.tensors.iter().zip(tensors) {
        let id = store.id(&e.name).ok_or_else(|| corrupt(format!("unknown tensor {}", e.name)))?;
        if store.get(id).shape() != t.shape() {
            return Err(corrupt(format!("{}: shape {:?}, network expects {:?}", e.name, t.shape(), store.get(id).shape())));
        }
        *store.get_mut(id) = t;
    }
    Ok((det, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig::toy();
        let (_, mut store) = Detector::new(&cfg, 3).unwrap();
        // Values that text formats tend to mangle.
        let id = store.ids().next().unwrap();
        let d = store.get_mut(id).data_mut();
        d[0] = -0.0;
        d[1] = f64::MIN_POSITIVE / 3.0;
        d[2] = 0.1 + 0.2;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, &cfg, &store).unwrap();
        let (det, back) = load(&p).unwrap();
        assert_eq!(det.cfg, cfg);
        assert_eq!(back.len(), store.len());
        for ((n1, a, t1), (n2, b, t2)) in store.iter().zip(back.iter()) {
            assert_eq!((n1, t1), (n2, t2));
            assert!(a.bit_eq(b), "{n1}");
        }
    }

    #[test]
    fn damaged_files_are_rejected() {
        let cfg = ModelConfig::toy();
        let (_, store) = Detector::new(&cfg, 0).unwrap();
        let bytes = encode(&cfg, &store);
        assert!(matches!(decode(b"nope"), Err(CheckpointError::BadMagic)));
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(CheckpointError::Corrupt(_))));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(decode(&longer), Err(CheckpointError::Corrupt(_))));
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(matches!(decode(&v2), Err(CheckpointError::Version(2))));
    }
}
