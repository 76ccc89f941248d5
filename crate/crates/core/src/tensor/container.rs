//! Flat binary container of named tensors.
//!
//! Layout (all integers little-endian):
//! magic `EGTC`, u32 version, u32 tensor count, then per tensor:
//! u32 name length, name bytes, u8 element width (4 or 8), u8 rank,
//! u64 per shape entry, raw little-endian element bytes.
//!
//! Round-trips are bit-exact: f32 tensors are stored as their f32 bit
//! patterns, f64 tensors as f64 bit patterns.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

const MAGIC: &[u8; 4] = b"EGTC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> u8 {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl From<super::Precision> for DType {
    fn from(p: super::Precision) -> DType {
        match p {
            super::Precision::F32 => DType::F32,
            super::Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub dtype: DType,
}

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic or truncated header")]
    BadHeader,
    #[error("unsupported container version {0}")]
    BadVersion(u32),
    #[error("malformed tensor record {index}: {reason}")]
    BadRecord { index: usize, reason: String },
    #[error("tensor {0} missing from container")]
    MissingTensor(String),
    #[error("tensor {name}: shape mismatch, expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

pub fn write_tensors(path: &Path, tensors: &[NamedTensor]) -> Result<(), ContainerError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.push(t.dtype.width());
        buf.push(t.shape.len() as u8);
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match t.dtype {
            DType::F32 => {
                for &v in &t.values {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            DType::F64 => {
                for &v in &t.values {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return None;
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }
}

pub fn read_tensors(path: &Path) -> Result<Vec<NamedTensor>, ContainerError> {
    let mut data = Vec::new();
    fs::File::open(path)?.read_to_end(&mut data)?;
    let mut cur = Cursor { data: &data, pos: 0 };
    if cur.take(4) != Some(MAGIC.as_slice()) {
        return Err(ContainerError::BadHeader);
    }
    let version = cur.u32().ok_or(ContainerError::BadHeader)?;
    if version != VERSION {
        return Err(ContainerError::BadVersion(version));
    }
    let count = cur.u32().ok_or(ContainerError::BadHeader)? as usize;
    let mut out = Vec::with_capacity(count);
    for index in 0..count {
        let bad = |reason: &str| ContainerError::BadRecord {
            index,
            reason: reason.to_string(),
        };
        let name_len = cur.u32().ok_or_else(|| bad("truncated name length"))? as usize;
        let name_bytes = cur.take(name_len).ok_or_else(|| bad("truncated name"))?;
        let name = String::from_utf8(name_bytes.to_vec()).map_err(|_| bad("name is not utf-8"))?;
        let width = cur.u8().ok_or_else(|| bad("truncated element width"))?;
        let dtype = match width {
            4 => DType::F32,
            8 => DType::F64,
            w => return Err(bad(&format!("unsupported element width {}", w))),
        };
        let rank = cur.u8().ok_or_else(|| bad("truncated rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64().ok_or_else(|| bad("truncated shape"))? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = cur
            .take(n * width as usize)
            .ok_or_else(|| bad("truncated element data"))?;
        let values: Vec<f64> = match dtype {
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        out.push(NamedTensor {
            name,
            shape,
            values,
            dtype,
        });
    }
    Ok(out)
}
