//! Named-tensor container.
//!
//! Layout (little-endian, compatible with the `safetensors` convention):
//!
//! ```text
//! u64                header length N
//! N bytes            JSON manifest: { name: {dtype, shape, data_offsets: [begin, end]},
//!                                     "__metadata__": { key: string } }
//! ...                raw tensor bytes, offsets relative to the end of the header
//! ```
//!
//! Supported dtypes on read: `F64`, `F32`, `F16`, `BF16`. Writes use `F64` or
//! `F32`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F64,
    F32,
    F16,
    BF16,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    dtype: Dtype,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub data: Vec<f64>,
}

impl Tensor {
    /// Views the tensor as a matrix of the requested shape; the element count
    /// must agree (e.g. a `[768, 3, 32, 32]` convolution kernel read as
    /// `768 × 3072`).
    pub fn to_mat(&self, name: &str, rows: usize, cols: usize) -> Result<Mat> {
        if self.data.len() != rows * cols {
            return Err(Error::Load {
                tensor: name.to_string(),
                msg: format!("shape {:?} cannot be viewed as {rows}x{cols}", self.shape),
            });
        }
        Ok(Mat::from_shape_vec((rows, cols), self.data.clone()).expect("length checked"))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorFile {
    pub fn insert_mat(&mut self, name: &str, m: &Mat) {
        self.tensors.insert(
            name.to_string(),
            Tensor {
                shape: vec![m.nrows(), m.ncols()],
                dtype: Dtype::F64,
                data: m.iter().copied().collect(),
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Load {
            tensor: name.to_string(),
            msg: "missing".into(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = serde_json::Map::new();
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let len = t.data.len() * t.dtype.size();
            let entry = Entry {
                dtype: t.dtype,
                shape: t.shape.clone(),
                data_offsets: [offset, offset + len],
            };
            header.insert(name.clone(), serde_json::to_value(entry)?);
            offset += len;
        }
        if !self.metadata.is_empty() {
            header.insert("__metadata__".into(), serde_json::to_value(&self.metadata)?);
        }
        let mut json = serde_json::to_vec(&header)?;
        while json.len() % 8 != 0 {
            json.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            match t.dtype {
                Dtype::F64 => t.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Dtype::F32 => t
                    .data
                    .iter()
                    .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
                Dtype::F16 => t.data.iter().for_each(|v| {
                    out.extend_from_slice(&half::f16::from_f64(*v).to_le_bytes())
                }),
                Dtype::BF16 => t.data.iter().for_each(|v| {
                    out.extend_from_slice(&half::bf16::from_f64(*v).to_le_bytes())
                }),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format("file shorter than header length".into()));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let body_start = 8usize
            .checked_add(n)
            .filter(|e| *e <= bytes.len())
            .ok_or_else(|| Error::Format("header length exceeds file size".into()))?;
        let header: serde_json::Map<String, serde_json::Value> =
            serde_json::from_slice(&bytes[8..body_start])
                .map_err(|e| Error::Format(format!("manifest is not valid JSON: {e}")))?;
        let body = &bytes[body_start..];
        let mut file = TensorFile::default();
        for (name, value) in header {
            if name == "__metadata__" {
                file.metadata = serde_json::from_value(value)
                    .map_err(|e| Error::Format(format!("metadata: {e}")))?;
                continue;
            }
            let entry: Entry = serde_json::from_value(value).map_err(|e| Error::Load {
                tensor: name.clone(),
                msg: format!("bad manifest entry: {e}"),
            })?;
            let [begin, end] = entry.data_offsets;
            let numel: usize = entry.shape.iter().product();
            if end < begin || end > body.len() || end - begin != numel * entry.dtype.size() {
                return Err(Error::Load {
                    tensor: name,
                    msg: format!(
                        "offsets {begin}..{end} inconsistent with shape {:?} ({:?})",
                        entry.shape, entry.dtype
                    ),
                });
            }
            let raw = &body[begin..end];
            let data: Vec<f64> = match entry.dtype {
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
                    .collect(),
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64)
                    .collect(),
                Dtype::F16 => raw
                    .chunks_exact(2)
                    .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f64())
                    .collect(),
                Dtype::BF16 => raw
                    .chunks_exact(2)
                    .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f64())
                    .collect(),
            };
            file.tensors.insert(
                name,
                Tensor {
                    shape: entry.shape,
                    dtype: entry.dtype,
                    data,
                },
            );
        }
        Ok(file)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}
