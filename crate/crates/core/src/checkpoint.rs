//! Flat named-tensor checkpoints.
//!
//! Layout: the 8-byte magic `CPXYCKPT`, a little-endian `u32` header length,
//! a JSON header (config hash, free-form metadata, tensor names and shapes),
//! then every tensor's values as little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Parameters;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CPXYCKPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config_hash: String,
    pub param_hash: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `params` atomically (temp file, then rename).
pub fn save<P: Parameters>(params: &P, config_hash: &str, meta: serde_json::Value, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        config_hash: config_hash.to_string(),
        param_hash: params.content_hash(),
        meta,
        tensors: params
            .names()
            .into_iter()
            .zip(params.tensors())
            .map(|(name, t)| TensorEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let hjson = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(12 + hjson.len() + 8 * params.num_parameters());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
    buf.extend_from_slice(&hjson);
    for t in params.tensors() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &buf)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn split_header(path: &Path, bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let end = 12 + hlen;
    if bytes.len() < end {
        return Err(Error::format(path, "truncated header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[12..end]).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((header, end))
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split_header(path, &bytes)?.0)
}

/// Loads values into an already-shaped parameter set. Names and shapes must
/// match exactly, and the stored parameter hash must match what was loaded.
pub fn load_into<P: Parameters>(params: &mut P, path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, mut off) = split_header(path, &bytes)?;
    let names = params.names();
    if names.len() != header.tensors.len() {
        return Err(Error::format(
            path,
            format!("{} tensors stored, {} expected", header.tensors.len(), names.len()),
        ));
    }
    for ((name, t), entry) in names.iter().zip(params.tensors_mut()).zip(&header.tensors) {
        if *name != entry.name || t.shape() != entry.shape.as_slice() {
            return Err(Error::format(
                path,
                format!("tensor `{}` {:?} does not fit `{name}` {:?}", entry.name, entry.shape, t.shape()),
            ));
        }
        let n = t.len();
        if bytes.len() < off + 8 * n {
            return Err(Error::format(path, "truncated tensor data"));
        }
        for (k, v) in t.data_mut().iter_mut().enumerate() {
            let s = off + 8 * k;
            *v = f64::from_le_bytes(bytes[s..s + 8].try_into().expect("8 bytes"));
        }
        off += 8 * n;
    }
    if off != bytes.len() {
        return Err(Error::format(path, "trailing bytes after tensor data"));
    }
    if params.content_hash() != header.param_hash {
        return Err(Error::HashMismatch(format!("{}: stored parameter hash differs", path.display())));
    }
    Ok(header)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::ranker::Mlp;

    #[test]
    fn round_trip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Mlp::init(&[5, 4, 2], false, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&a, "cfg", serde_json::json!({"k": 1}), &path).unwrap();
        let mut b = a.zeros_like();
        let h = load_into(&mut b, &path).unwrap();
        assert_eq!(a, b);
        assert_eq!(h.meta["k"], 1);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Mlp::init(&[5, 4, 2], false, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&a, "cfg", serde_json::Value::Null, &path).unwrap();
        let mut b = Mlp::init(&[5, 3, 2], false, &mut rng);
        assert!(matches!(load_into(&mut b, &path), Err(Error::Format { .. })));
    }
}
