//! Named-tensor container: a JSON index header followed by `CPT1` blobs.
//!
//! Layout: `u64` little-endian header length, the UTF-8 JSON header
//! `{"manifest": …, "tensors": [{"name", "offset", "shape"}, …]}`, then the
//! concatenated `CPT1` encodings. Offsets are relative to the first byte
//! after the header.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct IndexEntry {
    name: String,
    offset: u64,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    manifest: serde_json::Value,
    tensors: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorArchive {
    pub manifest: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl TensorArchive {
    pub fn new(manifest: serde_json::Value) -> Self {
        Self {
            manifest,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: &Tensor) {
        self.tensors.push((name.into(), tensor.detached()));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Lookup(format!("tensor `{name}` missing from archive")))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut blobs = Vec::new();
        let mut index = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            index.push(IndexEntry {
                name: name.clone(),
                offset: blobs.len() as u64,
                shape: t.shape().to_vec(),
            });
            t.write_cpt1(&mut blobs)?;
        }
        let header = serde_json::to_vec(&Header {
            manifest: self.manifest.clone(),
            tensors: index,
        })?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&blobs)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        let mut blobs = Vec::new();
        r.read_to_end(&mut blobs)?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let start = usize::try_from(entry.offset)
                .ok()
                .filter(|&o| o <= blobs.len())
                .ok_or_else(|| Error::format(format!("offset of `{}` out of range", entry.name)))?;
            let t = Tensor::from_cpt1_bytes(&blobs[start..])?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::format(format!(
                    "index shape {:?} of `{}` disagrees with blob {:?}",
                    entry.shape,
                    entry.name,
                    t.shape()
                )));
            }
            tensors.push((entry.name, t));
        }
        Ok(Self {
            manifest: header.manifest,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits_and_order() {
        let mut a = TensorArchive::new(serde_json::json!({"kind": "test", "n": 2}));
        a.push("w", &Tensor::new(vec![2, 2], vec![0.1, -0.0, 1e-300, 3.5]).unwrap());
        a.push("b", &Tensor::scalar(f64::MIN_POSITIVE));
        let mut bytes = Vec::new();
        a.write_to(&mut bytes).unwrap();
        let back = TensorArchive::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.manifest, a.manifest);
        assert_eq!(back.tensors.len(), 2);
        for ((n1, t1), (n2, t2)) in a.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.checksum(), t2.checksum());
        }
        assert!(back.get("missing").is_err());
    }

    #[test]
    fn truncated_archive_fails() {
        let mut a = TensorArchive::new(serde_json::json!({}));
        a.push("w", &Tensor::zeros(&[3]));
        let mut bytes = Vec::new();
        a.write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 4);
        assert!(TensorArchive::read_from(&mut bytes.as_slice()).is_err());
    }
}
