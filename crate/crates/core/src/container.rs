//! Binary tensor container.
//!
//! Layout:
//!
//! ```text
//! "PALU" | 0x01 | header_len: u32 LE | header: UTF-8 JSON | data
//! ```
//!
//! The header is `{"tensors": [{name, dtype, shape, bits?, offset,
//! byte_len}], "meta": {...}}`, padded with trailing spaces so the data
//! section starts on an 8-byte boundary. Offsets are relative to the data
//! start and 8-byte aligned. `f64` payloads are raw little-endian;
//! `u8-packed` payloads are LSB-first bit streams of `bits`-wide codes,
//! zero-padded to the alignment.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{PaluError, Result};
use crate::quant::{pack_codes, packed_len, unpack_codes};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"PALU";
pub const VERSION: u8 = 1;
const PREFIX: usize = 9;
const ALIGN: usize = 8;

fn align(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    Packed { bits: u8, codes: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let t = Tensor {
            shape,
            data: TensorData::F64(data),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn packed(shape: Vec<usize>, bits: u8, codes: Vec<u8>) -> Result<Self> {
        let t = Tensor {
            shape,
            data: TensorData::Packed { bits, codes },
        };
        t.validate()?;
        Ok(t)
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Tensor {
            shape: vec![m.rows(), m.cols()],
            data: TensorData::F64(m.as_slice().to_vec()),
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        let n = self.len();
        match &self.data {
            TensorData::F64(v) if v.len() != n => Err(PaluError::Format(format!(
                "shape {:?} needs {n} values, got {}",
                self.shape,
                v.len()
            ))),
            TensorData::Packed { bits, codes } => {
                if ![2, 3, 4, 8].contains(bits) {
                    return Err(PaluError::Format(format!("unsupported packed width {bits}")));
                }
                if codes.len() != n {
                    return Err(PaluError::Format(format!(
                        "shape {:?} needs {n} codes, got {}",
                        self.shape,
                        codes.len()
                    )));
                }
                let max = ((1u16 << bits) - 1) as u8;
                if let Some(c) = codes.iter().find(|c| **c > max) {
                    return Err(PaluError::Format(format!("code {c} does not fit in {bits} bits")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn byte_len(&self) -> usize {
        match &self.data {
            TensorData::F64(v) => v.len() * 8,
            TensorData::Packed { bits, codes } => align(packed_len(codes.len(), *bits)),
        }
    }

    /// The tensor as a matrix; 1-D tensors become a single row.
    pub fn to_matrix(&self) -> Result<Matrix> {
        let TensorData::F64(v) = &self.data else {
            return Err(PaluError::Format("expected an f64 tensor".into()));
        };
        match self.shape.as_slice() {
            [r, c] => Matrix::new(*r, *c, v.clone()),
            [n] => Matrix::new(1, *n, v.clone()),
            s => Err(PaluError::Format(format!("tensor of shape {s:?} is not a matrix"))),
        }
    }

    pub fn as_f64(&self) -> Result<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Ok(v),
            _ => Err(PaluError::Format("expected an f64 tensor".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bits: Option<u8>,
    offset: usize,
    byte_len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    tensors: Vec<Entry>,
    meta: Value,
}

/// Named tensors in insertion order plus free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub tensors: IndexMap<String, Tensor>,
    pub meta: Value,
}

impl Default for Container {
    fn default() -> Self {
        Self::new()
    }
}

impl Container {
    pub fn new() -> Self {
        Container {
            tensors: IndexMap::new(),
            meta: Value::Object(Default::default()),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        tensor.validate()?;
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(PaluError::Format(format!("duplicate tensor {name:?}")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn insert_matrix(&mut self, name: impl Into<String>, m: &Matrix) -> Result<()> {
        self.insert(name, Tensor::from_matrix(m))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| PaluError::Format(format!("missing tensor {name:?}")))
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        self.get(name)?.to_matrix()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            let (dtype, bits) = match &t.data {
                TensorData::F64(_) => ("f64", None),
                TensorData::Packed { bits, .. } => ("u8-packed", Some(*bits)),
            };
            let byte_len = t.byte_len();
            entries.push(Entry {
                name: name.clone(),
                dtype: dtype.into(),
                shape: t.shape.clone(),
                bits,
                offset,
                byte_len,
            });
            offset += byte_len;
        }
        let header = Header {
            tensors: entries,
            meta: self.meta.clone(),
        };
        let mut json = serde_json::to_vec(&header)?;
        json.resize(align(PREFIX + json.len()) - PREFIX, b' ');
        let header_len = u32::try_from(json.len()).map_err(|_| PaluError::Format("header exceeds 4 GiB".into()))?;

        let mut out = Vec::with_capacity(PREFIX + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            let start = out.len();
            match &t.data {
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::Packed { bits, codes } => out.extend_from_slice(&pack_codes(codes, *bits)),
            }
            out.resize(start + t.byte_len(), 0);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| PaluError::Format(msg);
        if bytes.len() < PREFIX || &bytes[..4] != MAGIC {
            return Err(bad("missing PALU magic".into()));
        }
        if bytes[4] != VERSION {
            return Err(bad(format!("unsupported version {}", bytes[4])));
        }
        let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let data_start = PREFIX
            .checked_add(header_len)
            .filter(|e| *e <= bytes.len())
            .ok_or_else(|| bad(format!("header length {header_len} exceeds the file")))?;
        if data_start % ALIGN != 0 {
            return Err(bad(format!("data section starts at unaligned offset {data_start}")));
        }
        let header: Header = serde_json::from_slice(&bytes[PREFIX..data_start])
            .map_err(|e| bad(format!("header: {e}")))?;
        let data = &bytes[data_start..];

        let mut spans: Vec<(usize, usize, &str)> = Vec::new();
        let mut tensors = IndexMap::new();
        for e in &header.tensors {
            let n = e
                .shape
                .iter()
                .try_fold(1usize, |a, d| a.checked_mul(*d))
                .ok_or_else(|| bad(format!("{}: shape overflows", e.name)))?;
            let expected = match (e.dtype.as_str(), e.bits) {
                ("f64", None) => n.checked_mul(8).ok_or_else(|| bad(format!("{}: size overflows", e.name)))?,
                ("u8-packed", Some(b)) if [2, 3, 4, 8].contains(&b) => align(packed_len(n, b)),
                (d, b) => return Err(bad(format!("{}: unsupported dtype {d:?} with bits {b:?}", e.name))),
            };
            if e.byte_len != expected {
                return Err(bad(format!("{}: byte_len {} but shape needs {expected}", e.name, e.byte_len)));
            }
            if e.offset % ALIGN != 0 {
                return Err(bad(format!("{}: offset {} is not 8-byte aligned", e.name, e.offset)));
            }
            let end = e
                .offset
                .checked_add(e.byte_len)
                .filter(|end| *end <= data.len())
                .ok_or_else(|| bad(format!("{}: payload runs past the end of the file", e.name)))?;
            spans.push((e.offset, end, &e.name));
            let raw = &data[e.offset..end];
            let tensor = match e.bits {
                None => Tensor {
                    shape: e.shape.clone(),
                    data: TensorData::F64(
                        raw.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    ),
                },
                Some(b) => Tensor {
                    shape: e.shape.clone(),
                    data: TensorData::Packed {
                        bits: b,
                        codes: unpack_codes(raw, b, n)?,
                    },
                },
            };
            if tensors.insert(e.name.clone(), tensor).is_some() {
                return Err(bad(format!("duplicate tensor {:?}", e.name)));
            }
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(bad(format!("tensors {} and {} overlap", w[0].2, w[1].2)));
            }
        }
        Ok(Container {
            tensors,
            meta: header.meta,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.insert("w", Tensor::f64(vec![2, 3], vec![1.0, -2.5, 3.0, f64::MIN_POSITIVE, -0.0, 1e300]).unwrap())
            .unwrap();
        c.insert("codes", Tensor::packed(vec![3, 3], 3, vec![0, 1, 2, 3, 4, 5, 6, 7, 7]).unwrap())
            .unwrap();
        c.meta = serde_json::json!({"kind": "test", "n": 3});
        c
    }

    #[test]
    fn layout() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"PALU");
        assert_eq!(bytes[4], 1);
        let hl = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        assert_eq!((9 + hl) % 8, 0);
        // 48 bytes of f64 then ceil(9·3/8) = 4 bytes padded to 8
        assert_eq!(bytes.len(), 9 + hl + 48 + 8);
        let header = std::str::from_utf8(&bytes[9..9 + hl]).unwrap();
        assert!(header.contains(r#""dtype":"u8-packed""#) && header.contains(r#""offset":48"#));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        let TensorData::F64(v) = &back.get("w").unwrap().data else { panic!() };
        assert_eq!(v[4].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back.to_bytes().unwrap(), c.to_bytes().unwrap());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(Container::from_bytes(&b).is_err());
        let mut b = bytes.clone();
        b[4] = 2;
        assert!(Container::from_bytes(&b).is_err());
        assert!(Container::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let text = String::from_utf8_lossy(&bytes).replace(r#""offset":48"#, r#""offset":40"#);
        assert!(Container::from_bytes(text.as_bytes()).is_err());
    }

    #[test]
    fn validates_tensors() {
        assert!(Tensor::f64(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::packed(vec![2], 2, vec![0, 4]).is_err());
        assert!(Tensor::packed(vec![2], 5, vec![0, 1]).is_err());
        let mut c = sample();
        assert!(c.insert("w", Tensor::f64(vec![1], vec![0.0]).unwrap()).is_err());
        assert!(c.matrix("codes").is_err());
        assert_eq!(c.matrix("w").unwrap().shape(), crate::tensor::Shape(2, 3));
    }
}
