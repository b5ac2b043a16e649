//! Named-tensor archive shared by model checkpoints and source statistics.
//!
//! ```text
//! "NTAR" | version u16 = 1 | manifest_len u32 | manifest (JSON, UTF-8)
//!        | tensor data: float32 little-endian, concatenated in manifest order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DattaError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ARCHIVE_MAGIC: &[u8; 4] = b"NTAR";
pub const ARCHIVE_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Offset into the data block, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub config_hash: String,
    pub dtype: String,
    pub endianness: String,
    /// Free-form payload, e.g. the model configuration.
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// A manifest plus its tensors, in order.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive<T> {
    pub manifest: Manifest,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Archive<T> {
    pub fn new(kind: &str, config_hash: String, metadata: serde_json::Value, named: Vec<(String, Tensor<T>)>) -> Self {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for (name, t) in named {
            entries.push(TensorEntry {
                name,
                shape: [t.rows(), t.cols()],
                offset,
            });
            offset += t.len();
            tensors.push(t);
        }
        Self {
            manifest: Manifest {
                kind: kind.to_string(),
                config_hash,
                dtype: "float32".into(),
                endianness: "little".into(),
                metadata,
                tensors: entries,
            },
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.manifest
            .tensors
            .iter()
            .position(|e| e.name == name)
            .map(|i| &self.tensors[i])
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let len = u32::try_from(manifest.len()).map_err(|_| DattaError::Format("manifest too large".into()))?;
        w.write_all(ARCHIVE_MAGIC)?;
        w.write_all(&ARCHIVE_VERSION.to_le_bytes())?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(&manifest)?;
        for t in &self.tensors {
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.as_f32().to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let truncated = |e: std::io::Error| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => DattaError::Format("truncated archive".into()),
            _ => DattaError::Io(e),
        };
        let mut head = [0u8; 10];
        r.read_exact(&mut head).map_err(truncated)?;
        if &head[..4] != ARCHIVE_MAGIC {
            return Err(DattaError::Format("not a tensor archive".into()));
        }
        let version = u16::from_le_bytes([head[4], head[5]]);
        if version != ARCHIVE_VERSION {
            return Err(DattaError::Format(format!("unsupported archive version {version}")));
        }
        let len = u32::from_le_bytes([head[6], head[7], head[8], head[9]]) as usize;
        let mut manifest = vec![0u8; len];
        r.read_exact(&mut manifest).map_err(truncated)?;
        let manifest: Manifest = serde_json::from_slice(&manifest)?;
        if manifest.dtype != "float32" || manifest.endianness != "little" {
            return Err(DattaError::Format(format!(
                "unsupported encoding {} / {}",
                manifest.dtype, manifest.endianness
            )));
        }
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        let mut expected_offset = 0;
        for e in &manifest.tensors {
            if e.offset != expected_offset {
                return Err(DattaError::Format(format!("tensor `{}` has offset {}", e.name, e.offset)));
            }
            let n = e.shape[0] * e.shape[1];
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf).map_err(truncated)?;
            let data = buf
                .chunks_exact(4)
                .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            tensors.push(Tensor::from_vec(e.shape[0], e.shape[1], data)?);
            expected_offset += n;
        }
        Ok(Self { manifest, tensors })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_f32_values_exactly() {
        let a = Archive::new(
            "test",
            "abc".into(),
            serde_json::json!({"k": 1}),
            vec![
                ("x".into(), Tensor::<f32>::from_vec(2, 3, vec![1.5, -0.25, 3.0e-8, 7.0, f32::MAX, 0.1]).unwrap()),
                ("y".into(), Tensor::row_vector(vec![9.0f32])),
            ],
        );
        let mut bytes = Vec::new();
        a.write_to(&mut bytes).unwrap();
        let b = Archive::<f32>::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.get("y").unwrap().item(), 9.0);
    }

    #[test]
    fn truncated_archive_is_a_format_error() {
        let a = Archive::new("t", String::new(), serde_json::Value::Null, vec![("x".into(), Tensor::<f32>::zeros(4, 4))]);
        let mut bytes = Vec::new();
        a.write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(Archive::<f32>::read_from(&mut bytes.as_slice()), Err(DattaError::Format(_))));
    }
}
