//! Binary checkpoint container: named f32 tensors plus a key=value
//! metadata block, self-describing and byte-stable across round trips.
//!
//! Layout (little-endian): magic `IKDP`, u32 version, u32-length-prefixed
//! UTF-8 metadata (key=value lines), u32 tensor count, then per tensor a
//! u16 name length, the name, a u8 rank, rank u32 dims, and the raw f32
//! payload.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::optim::ParamSet;
use crate::tensor::{Array, Shape};

const MAGIC: &[u8; 4] = b"IKDP";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes; not an ikdp checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint while reading {0}")]
    Truncated(String),
    #[error("malformed metadata: {0}")]
    BadMetadata(String),
    #[error("tensor {name} has unsupported rank {rank}")]
    BadRank { name: String, rank: u8 },
    #[error("metadata key {0} missing")]
    MissingKey(&'static str),
}

/// Raw checkpoint content; typed views live with their producers.
#[derive(Clone, Debug)]
pub struct CheckpointFile {
    pub meta: Vec<(String, String)>,
    pub tensors: ParamSet,
}

impl CheckpointFile {
    pub fn meta_get(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &'static str) -> Result<&str, CheckpointError> {
        self.meta_get(key).ok_or(CheckpointError::MissingKey(key))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta_text = String::new();
        for (k, v) in &self.meta {
            meta_text.push_str(k);
            meta_text.push('=');
            meta_text.push_str(v);
            meta_text.push('\n');
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta_text.len() as u32).to_le_bytes());
        out.extend_from_slice(meta_text.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, arr) in self.tensors.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let shape = arr.shape();
            let dims = shape.dims();
            out.push(dims.len() as u8);
            for &d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in arr.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<CheckpointFile, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta_bytes = r.take(meta_len, "metadata")?;
        let meta_text = std::str::from_utf8(meta_bytes)
            .map_err(|e| CheckpointError::BadMetadata(e.to_string()))?;
        let mut meta = Vec::new();
        for line in meta_text.lines() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::BadMetadata(line.to_string()))?;
            meta.push((k.to_string(), v.to_string()));
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = ParamSet::new();
        for _ in 0..count {
            let name_len = r.u16("tensor name length")? as usize;
            let name_bytes = r.take(name_len, "tensor name")?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|e| CheckpointError::BadMetadata(e.to_string()))?
                .to_string();
            let rank = r.byte(&name)?;
            if rank == 0 || rank > 3 {
                return Err(CheckpointError::BadRank { name, rank });
            }
            let mut dims = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                dims.push(r.u32(&name)? as usize);
            }
            let shape = match dims.len() {
                1 => Shape::d1(dims[0]),
                2 => Shape::d2(dims[0], dims[1]),
                _ => Shape::d3(dims[0], dims[1], dims[2]),
            };
            let numel = shape.numel();
            let payload = r.take(numel * 4, &name)?;
            let values: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let arr = Array::from_vec(shape, values)
                .map_err(|e| CheckpointError::BadMetadata(e.to_string()))?;
            tensors.push(&name, arr);
        }
        Ok(CheckpointFile { meta, tensors })
    }

    pub fn load(path: &Path) -> Result<CheckpointFile, CheckpointError> {
        let bytes = fs::read(path)?;
        CheckpointFile::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated(what.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn byte(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, CheckpointError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample_file() -> CheckpointFile {
        let mut tensors = ParamSet::new();
        tensors.push(
            "w",
            Array::from_vec(Shape::d2(2, 3), vec![1.0, -2.5, 3.25, 0.0, 1e-7, -0.0]).unwrap(),
        );
        tensors.push("b", Array::from_vec(Shape::d1(3), vec![0.5, 0.25, -1.0]).unwrap());
        CheckpointFile {
            meta: vec![
                ("kind".into(), "diffusion".into()),
                ("n_joints".into(), "4".into()),
            ],
            tensors,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        let f = sample_file();
        f.save(&p1).unwrap();
        let loaded = CheckpointFile::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(loaded.meta_get("kind"), Some("diffusion"));
        assert_eq!(loaded.tensors.array(0).values(), f.tensors.array(0).values());
    }

    #[test]
    fn corrupt_magic_is_distinct() {
        let mut bytes = sample_file().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            CheckpointFile::from_bytes(&bytes),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn unsupported_version_is_distinct() {
        let mut bytes = sample_file().to_bytes();
        bytes[4] = 9;
        assert!(matches!(
            CheckpointFile::from_bytes(&bytes),
            Err(CheckpointError::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn truncated_payload_names_tensor() {
        let bytes = sample_file().to_bytes();
        // cut into the middle of tensor "b"'s payload
        let cut = bytes.len() - 5;
        match CheckpointFile::from_bytes(&bytes[..cut]) {
            Err(CheckpointError::Truncated(what)) => assert_eq!(what, "b"),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }
}
