//! Self-describing binary container for weight tensors.
//!
//! Layout: the 8-byte magic `SSRVCKPT`, a little-endian `u32` version, a
//! little-endian `u64` header length, a JSON header naming the container kind,
//! free-form metadata and the ordered tensor list with shapes, and finally the
//! raw little-endian `f64` payload of every tensor in header order. Values
//! round-trip bit-exactly.

use std::collections::VecDeque;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SSRVCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    tensors: VecDeque<NamedTensor>,
}

impl Container {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self { kind: kind.to_string(), meta, tensors: VecDeque::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push_back(NamedTensor { name: name.into(), shape, data });
    }

    pub fn push_matrix(&mut self, name: impl Into<String>, m: &Array2<f64>) {
        self.push(name, m.shape().to_vec(), m.iter().copied().collect());
    }

    pub fn push_vector(&mut self, name: impl Into<String>, v: &Array1<f64>) {
        self.push(name, vec![v.len()], v.to_vec());
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Removes the next tensor, checking its name and shape.
    pub fn pop(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let t = self
            .tensors
            .pop_front()
            .ok_or_else(|| Error::format(format!("missing tensor `{name}`")))?;
        if t.name != name {
            return Err(Error::format(format!("expected tensor `{name}`, found `{}`", t.name)));
        }
        if t.shape != shape {
            return Err(Error::validation(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                t.shape, shape
            )));
        }
        Ok(t.data)
    }

    pub fn pop_matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let data = self.pop(name, &[rows, cols])?;
        Ok(Array2::from_shape_vec((rows, cols), data).expect("shape checked"))
    }

    pub fn pop_vector(&mut self, name: &str, len: usize) -> Result<Array1<f64>> {
        Ok(Array1::from(self.pop(name, &[len])?))
    }

    /// Fails unless every tensor has been consumed.
    pub fn finish(self) -> Result<()> {
        match self.tensors.front() {
            Some(t) => Err(Error::format(format!("unexpected trailing tensor `{}`", t.name))),
            None => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorHeader { name: t.name.clone(), shape: t.shape.clone() })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = self.tensors.iter().map(|t| t.data.len() * 8).sum();
        let mut out = Vec::with_capacity(20 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::format("not a checkpoint container"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(format!("unsupported container version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])
            .map_err(|e| Error::format(format!("bad header: {e}")))?;

        let mut expected = 0usize;
        for t in &header.tensors {
            let n = t
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::format(format!("tensor `{}` too large", t.name)))?;
            expected = expected
                .checked_add(n)
                .ok_or_else(|| Error::format("payload too large"))?;
        }
        let payload = &bytes[header_end..];
        if payload.len() != expected {
            return Err(Error::format(format!(
                "payload has {} bytes, header describes {expected}",
                payload.len()
            )));
        }

        let mut tensors = VecDeque::with_capacity(header.tensors.len());
        let mut chunks = payload.chunks_exact(8);
        for t in header.tensors {
            let n: usize = t.shape.iter().product();
            let data = chunks
                .by_ref()
                .take(n)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push_back(NamedTensor { name: t.name, shape: t.shape, data });
        }
        Ok(Self { kind: header.kind, meta: header.meta, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Parses the metadata into a typed value.
    pub fn meta_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.meta.clone())
            .map_err(|e| Error::format(format!("bad {} metadata: {e}", self.kind)))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::format(format!("expected a `{kind}` container, found `{}`", self.kind)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("test", serde_json::json!({"d": 3}));
        c.push("a", vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]);
        c.push("b", vec![3], vec![0.1, 0.2, 0.3]);
        c
    }

    #[test]
    fn round_trips_bit_exactly() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.kind, "test");
        let bits = |c: &Container| -> Vec<u64> {
            c.tensors.iter().flat_map(|t| t.data.iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&c), bits(&back));
        assert_eq!(back.meta["d"], 3);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = sample().to_bytes();
        for cut in 0..bytes.len() {
            assert!(
                matches!(Container::from_bytes(&bytes[..cut]), Err(Error::Format(_))),
                "truncation at {cut} accepted"
            );
        }
    }

    #[test]
    fn pop_checks_names_and_shapes() {
        let mut c = sample();
        assert!(matches!(c.clone().pop("b", &[3]), Err(Error::Format(_))));
        assert!(matches!(c.clone().pop("a", &[4]), Err(Error::Validation(_))));
        c.pop("a", &[2, 2]).unwrap();
        assert!(c.clone().finish().is_err());
        c.pop("b", &[3]).unwrap();
        c.finish().unwrap();
    }
}
