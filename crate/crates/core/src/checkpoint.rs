//! Named-tensor archive used for checkpoints.
//!
//! Layout: magic `TVCK`, format version, a JSON header (configs, counters,
//! seed), then a sorted table of named tensors stored as raw little-endian
//! element bits. Raw bits make save/load round trips exact to the ulp.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::scalar::{Dtype, Scalar};

const MAGIC: &[u8; 4] = b"TVCK";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint archive (bad magic)")]
    BadMagic,
    #[error("unsupported archive version {0}")]
    BadVersion(u32),
    #[error("archive holds {found:?} tensors, expected {expected:?}")]
    DtypeMismatch { found: Dtype, expected: Dtype },
    #[error("corrupt archive: {0}")]
    Corrupt(String),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone)]
pub struct Archive<F: Scalar> {
    pub header: serde_json::Value,
    tensors: BTreeMap<String, (Vec<usize>, Vec<F>)>,
}

impl<F: Scalar> Archive<F> {
    pub fn new(header: serde_json::Value) -> Self {
        Archive {
            header,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<F>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.insert(name.into(), (shape, data));
    }

    pub fn insert_all(&mut self, tensors: Vec<(String, Vec<usize>, Vec<F>)>) {
        for (name, shape, data) in tensors {
            self.insert(name, shape, data);
        }
    }

    pub fn get(&self, name: &str) -> Option<&(Vec<usize>, Vec<F>)> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Fetch-with-shape-check closure compatible with the networks'
    /// `load_tensors`.
    pub fn fetch(&self, name: &str, shape: &[usize]) -> Result<Vec<F>, String> {
        let (s, d) = self
            .tensors
            .get(name)
            .ok_or_else(|| format!("missing tensor {name:?}"))?;
        if s != shape {
            return Err(format!(
                "tensor {name:?} has shape {s:?}, expected {shape:?}"
            ));
        }
        Ok(d.clone())
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header)?;
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        buf.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, (shape, data)) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(F::DTYPE.tag());
            buf.extend_from_slice(&(shape.len() as u64).to_le_bytes());
            for &d in shape {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in data {
                v.write_le(&mut buf);
            }
        }
        let mut file = fs::File::create(path)?;
        file.write_all(&buf)?;
        file.sync_all()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut at = 0usize;
        let take = |at: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
            if *at + n > bytes.len() {
                return Err(CheckpointError::Corrupt("truncated archive".into()));
            }
            let s = &bytes[*at..*at + n];
            *at += n;
            Ok(s)
        };
        let take_u64 = |at: &mut usize| -> Result<u64, CheckpointError> {
            let s = take(at, 8)?;
            Ok(u64::from_le_bytes(s.try_into().unwrap()))
        };

        if take(&mut at, 4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let hlen = take_u64(&mut at)? as usize;
        let header: serde_json::Value = serde_json::from_slice(take(&mut at, hlen)?)?;
        let count = take_u64(&mut at)? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = take_u64(&mut at)? as usize;
            let name = String::from_utf8(take(&mut at, nlen)?.to_vec())
                .map_err(|_| CheckpointError::Corrupt("non-utf8 tensor name".into()))?;
            let tag = take(&mut at, 1)?[0];
            let dtype = Dtype::from_tag(tag)
                .ok_or_else(|| CheckpointError::Corrupt(format!("unknown dtype tag {tag}")))?;
            if dtype != F::DTYPE {
                return Err(CheckpointError::DtypeMismatch {
                    found: dtype,
                    expected: F::DTYPE,
                });
            }
            let ndim = take_u64(&mut at)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(take_u64(&mut at)? as usize);
            }
            let n: usize = shape.iter().product();
            let width = F::DTYPE.byte_width();
            let raw = take(&mut at, n * width)?;
            let data: Vec<F> = raw.chunks_exact(width).map(F::read_le).collect();
            tensors.insert(name, (shape, data));
        }
        Ok(Archive { header, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.tvck");
        let mut a = Archive::<f32>::new(json!({"epoch": 3, "seed": 9}));
        a.insert("net.w", vec![2, 3], vec![0.1, -0.2, 3.5e-8, f32::MIN_POSITIVE, 1.0, -0.0]);
        a.insert("net.b", vec![2], vec![1.5, -2.25]);
        a.write(&path).unwrap();
        let b = Archive::<f32>::read(&path).unwrap();
        assert_eq!(b.header["epoch"], 3);
        let (shape, data) = b.get("net.w").unwrap();
        assert_eq!(shape, &vec![2, 3]);
        for (x, y) in data.iter().zip(a.get("net.w").unwrap().1.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn writes_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("1.tvck");
        let p2 = dir.path().join("2.tvck");
        let mut a = Archive::<f64>::new(json!({"k": 1}));
        // insertion order differs; byte output must not
        a.insert("z", vec![1], vec![1.0]);
        a.insert("a", vec![1], vec![2.0]);
        a.write(&p1).unwrap();
        let mut b = Archive::<f64>::new(json!({"k": 1}));
        b.insert("a", vec![1], vec![2.0]);
        b.insert("z", vec![1], vec![1.0]);
        b.write(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn wrong_magic_and_dtype_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tvck");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(
            Archive::<f32>::read(&path),
            Err(CheckpointError::BadMagic)
        ));
        let good = dir.path().join("good.tvck");
        let mut a = Archive::<f32>::new(json!({}));
        a.insert("t", vec![1], vec![1.0]);
        a.write(&good).unwrap();
        assert!(matches!(
            Archive::<f64>::read(&good),
            Err(CheckpointError::DtypeMismatch { .. })
        ));
    }
}
