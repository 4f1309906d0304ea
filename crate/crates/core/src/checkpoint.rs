//! Binary checkpoint format.
//!
//! Layout: an 8-byte magic, a little-endian `u32` version, then
//! length-prefixed records: the task name, ordered `key=value` header
//! metadata (model hyperparameters, epoch/step counters, optimizer scalars,
//! RNG position), vocabulary snapshots, and named tensors stored as
//! `(name, dims as u64, little-endian f32 values)`. Every float round-trips
//! bitwise. Version or magic mismatches and truncations are hard errors.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SGFCKPT\0";
pub const VERSION: u32 = 1;

const MAX_STRING_BYTES: usize = 1 << 20;
const MAX_RECORDS: usize = 1 << 24;
const MAX_TENSOR_VALUES: usize = 1 << 28;

/// Errors surfaced by checkpoint IO and model restoration.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: not a checkpoint (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: checkpoint version {found}, this build reads {expected}")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{path}: truncated while reading {context}")]
    Truncated { path: PathBuf, context: String },
    #[error("{path}: malformed checkpoint: {detail}")]
    Malformed { path: PathBuf, detail: String },
    #[error("tensor {name:?}: {detail}")]
    TensorMismatch { name: String, detail: String },
}

/// One named tensor payload.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

/// A fully materialized checkpoint.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    /// Which model role the tensors belong to (`t2g`, `g2p`, `t2p`, `p2t`).
    pub task: String,
    /// Ordered metadata pairs; keys are free-form dotted names.
    pub header: Vec<(String, String)>,
    /// Named vocabulary snapshots (token lists in index order).
    pub vocabs: Vec<(String, Vec<String>)>,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn vocab(&self, name: &str) -> Option<&[String]> {
        self.vocabs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        write_str(&mut out, &self.task);
        write_u32(&mut out, self.header.len() as u32);
        for (k, v) in &self.header {
            write_str(&mut out, k);
            write_str(&mut out, v);
        }
        write_u32(&mut out, self.vocabs.len() as u32);
        for (name, tokens) in &self.vocabs {
            write_str(&mut out, name);
            write_u32(&mut out, tokens.len() as u32);
            for t in tokens {
                write_str(&mut out, t);
            }
        }
        write_u32(&mut out, self.tensors.len() as u32);
        for t in &self.tensors {
            write_str(&mut out, &t.name);
            write_u32(&mut out, t.dims.len() as u32);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader {
            buf: bytes,
            pos: 0,
            path,
        };
        let magic = r.take(MAGIC.len(), "magic")?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic {
                path: path.to_path_buf(),
            });
        }
        let version = r.read_u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch {
                path: path.to_path_buf(),
                found: version,
                expected: VERSION,
            });
        }

        let task = r.read_str("task")?;
        let header_len = r.read_count("header count")?;
        let mut header = Vec::with_capacity(header_len);
        for i in 0..header_len {
            let k = r.read_str(&format!("header key {i}"))?;
            let v = r.read_str(&format!("header value {i}"))?;
            header.push((k, v));
        }

        let vocab_len = r.read_count("vocabulary count")?;
        let mut vocabs = Vec::with_capacity(vocab_len);
        for i in 0..vocab_len {
            let name = r.read_str(&format!("vocabulary name {i}"))?;
            let tokens_len = r.read_count(&format!("vocabulary {name:?} token count"))?;
            let mut tokens = Vec::with_capacity(tokens_len);
            for t in 0..tokens_len {
                tokens.push(r.read_str(&format!("vocabulary {name:?} token {t}"))?);
            }
            vocabs.push((name, tokens));
        }

        let tensor_len = r.read_count("tensor count")?;
        let mut tensors = Vec::with_capacity(tensor_len);
        for i in 0..tensor_len {
            let name = r.read_str(&format!("tensor name {i}"))?;
            let rank = r.read_count(&format!("tensor {name:?} rank"))?;
            if rank > 8 {
                return Err(r.malformed(format!("tensor {name:?} declares rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank);
            let mut numel = 1usize;
            for d in 0..rank {
                let dim = r.read_u64(&format!("tensor {name:?} dim {d}"))? as usize;
                numel = numel.saturating_mul(dim);
                dims.push(dim);
            }
            if numel > MAX_TENSOR_VALUES {
                return Err(r.malformed(format!(
                    "tensor {name:?} declares {numel} values, limit {MAX_TENSOR_VALUES}"
                )));
            }
            let raw = r.take(numel * 4, &format!("tensor {name:?} values"))?;
            let values = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.push(TensorRecord { name, dims, values });
        }

        if r.pos != bytes.len() {
            return Err(r.malformed(format!(
                "{} trailing bytes after the declared records",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            task,
            header,
            vocabs,
            tensors,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(path, &bytes)
    }
}

fn write_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    write_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated {
                path: self.path.to_path_buf(),
                context: context.to_string(),
            });
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn malformed(&self, detail: String) -> CheckpointError {
        CheckpointError::Malformed {
            path: self.path.to_path_buf(),
            detail,
        }
    }

    fn read_u32(&mut self, context: &str) -> Result<u32, CheckpointError> {
        let b = self.take(4, context)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn read_u64(&mut self, context: &str) -> Result<u64, CheckpointError> {
        let b = self.take(8, context)?;
        Ok(u64::from_le_bytes(b.try_into().expect("slice of 8")))
    }

    fn read_count(&mut self, context: &str) -> Result<usize, CheckpointError> {
        let n = self.read_u32(context)? as usize;
        if n > MAX_RECORDS {
            return Err(self.malformed(format!("{context}: {n} exceeds limit {MAX_RECORDS}")));
        }
        Ok(n)
    }

    fn read_str(&mut self, context: &str) -> Result<String, CheckpointError> {
        let len = self.read_u32(context)? as usize;
        if len > MAX_STRING_BYTES {
            return Err(self.malformed(format!(
                "{context}: string of {len} bytes exceeds limit {MAX_STRING_BYTES}"
            )));
        }
        let raw = self.take(len, context)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| self.malformed(format!("{context}: invalid UTF-8")))
    }
}

/// Snapshots named parameters into tensor records (insertion order kept).
pub fn records_from_parameters(params: &[(String, Tensor<f32>)]) -> Vec<TensorRecord> {
    params
        .iter()
        .map(|(name, t)| TensorRecord {
            name: name.clone(),
            dims: t.shape().to_vec(),
            values: t.values(),
        })
        .collect()
}

/// Copies checkpoint tensors back into live parameters, by name. The first
/// missing or shape-mismatched tensor aborts the restore with its name.
pub fn restore_parameters(
    ckpt: &Checkpoint,
    params: &[(String, Tensor<f32>)],
) -> Result<(), CheckpointError> {
    for (name, param) in params {
        let record = ckpt
            .tensor(name)
            .ok_or_else(|| CheckpointError::TensorMismatch {
                name: name.clone(),
                detail: "not present in the checkpoint".into(),
            })?;
        if record.dims != param.shape() {
            return Err(CheckpointError::TensorMismatch {
                name: name.clone(),
                detail: format!(
                    "checkpoint shape {:?} does not fit parameter shape {:?}",
                    record.dims,
                    param.shape()
                ),
            });
        }
        param
            .set_values(record.values.clone())
            .map_err(|e| CheckpointError::TensorMismatch {
                name: name.clone(),
                detail: e.to_string(),
            })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn sample_checkpoint() -> Checkpoint {
        Checkpoint {
            task: "t2p".into(),
            header: vec![
                ("model.num_layers".into(), "2".into()),
                ("epoch".into(), "7".into()),
            ],
            vocabs: vec![(
                "src".into(),
                vec!["<pad>".into(), "<bos>".into(), "<eos>".into(), "<unk>".into(), "w01".into()],
            )],
            tensors: vec![
                TensorRecord {
                    name: "out.weight".into(),
                    dims: vec![2, 3],
                    values: vec![0.1, -0.0, f32::MIN_POSITIVE, 3.4e38, -1.5, 2.0e-41],
                },
                TensorRecord {
                    name: "out.bias".into(),
                    dims: vec![3],
                    values: vec![0.0, 1.0, -2.5],
                },
            ],
        }
    }

    #[test]
    fn round_trip_preserves_every_field_bitwise() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample_checkpoint();
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt, back);
        for (a, b) in ckpt.tensors[0]
            .values
            .iter()
            .zip(&back.tensors[0].values)
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn bad_magic_and_version_are_hard_errors() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample_checkpoint();
        let mut bytes = ckpt.to_bytes();
        bytes[0] ^= 0xFF;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CheckpointError::BadMagic { .. })
        ));

        let mut bytes = ckpt.to_bytes();
        bytes[8] = 99;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CheckpointError::VersionMismatch { found: 99, .. })
        ));
    }

    #[test]
    fn every_truncation_is_rejected_without_panicking() {
        let bytes = sample_checkpoint().to_bytes();
        let path = Path::new("mem.ckpt");
        for len in 0..bytes.len() {
            let err = Checkpoint::from_bytes(path, &bytes[..len]);
            assert!(err.is_err(), "prefix of {len} bytes must not parse");
        }
        assert!(Checkpoint::from_bytes(path, &bytes).is_ok());
        let mut padded = bytes.clone();
        padded.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(path, &padded),
            Err(CheckpointError::Malformed { .. })
        ));
    }

    #[test]
    fn insane_declared_sizes_are_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        // Task string claiming 100 MB.
        bytes.extend_from_slice(&(100_000_000u32).to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(Path::new("mem"), &bytes),
            Err(CheckpointError::Malformed { .. })
        ));
    }

    #[test]
    fn restore_copies_values_and_names_the_first_offender() {
        let w = Tensor::<f32>::parameter(vec![0.0; 6], &[2, 3]).unwrap();
        let params = vec![("out.weight".to_string(), w.clone())];
        let ckpt = sample_checkpoint();
        restore_parameters(&ckpt, &params).unwrap();
        assert_eq!(w.values(), ckpt.tensors[0].values);

        let missing = vec![(
            "nope.weight".to_string(),
            Tensor::<f32>::parameter(vec![0.0], &[1]).unwrap(),
        )];
        match restore_parameters(&ckpt, &missing).unwrap_err() {
            CheckpointError::TensorMismatch { name, .. } => assert_eq!(name, "nope.weight"),
            other => panic!("unexpected error {other:?}"),
        }

        let wrong_shape = vec![(
            "out.weight".to_string(),
            Tensor::<f32>::parameter(vec![0.0; 4], &[2, 2]).unwrap(),
        )];
        match restore_parameters(&ckpt, &wrong_shape).unwrap_err() {
            CheckpointError::TensorMismatch { name, .. } => assert_eq!(name, "out.weight"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn records_snapshot_parameters_in_order() {
        let a = Tensor::<f32>::parameter(vec![1.0, 2.0], &[2]).unwrap();
        let b = Tensor::<f32>::parameter(vec![3.0], &[1]).unwrap();
        let records = records_from_parameters(&[
            ("a".to_string(), a),
            ("b".to_string(), b),
        ]);
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].name, "a");
        assert_eq!(records[0].dims, vec![2]);
        assert_eq!(records[1].values, vec![3.0]);
    }
}
