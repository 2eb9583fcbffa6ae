//! `HSTN` tensor container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `HSTN` |
//! | 1     | version (currently 1) |
//! | 1     | dtype code: 0=f32, 1=f64, 2=u8, 3=u16 |
//! | 1     | ndim |
//! | 4·ndim| dims as u32 |
//! | rest  | row-major element data |

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HSTN";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U8 = 2,
    U16 = 3,
}

impl DType {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U8),
            3 => Some(DType::U16),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
            DType::U16 => 2,
        }
    }
}

/// A typed n-dimensional array as stored in a container file.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
    U8(ArrayD<u8>),
    U16(ArrayD<u16>),
}

impl Tensor {
    pub fn dtype(&self) -> DType {
        match self {
            Tensor::F32(_) => DType::F32,
            Tensor::F64(_) => DType::F64,
            Tensor::U8(_) => DType::U8,
            Tensor::U16(_) => DType::U16,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::F32(a) => a.shape(),
            Tensor::F64(a) => a.shape(),
            Tensor::U8(a) => a.shape(),
            Tensor::U16(a) => a.shape(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let shape = self.shape();
        let numel: usize = shape.iter().product();
        let mut out = Vec::with_capacity(7 + 4 * shape.len() + numel * self.dtype().size());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.dtype() as u8);
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match self {
            Tensor::F32(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Tensor::F64(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Tensor::U8(a) => out.extend(a.iter().copied()),
            Tensor::U16(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
        out
    }

    /// Parses a container. `origin` is only used to label errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::integrity(origin, reason);
        if bytes.len() < 7 {
            return Err(bad("truncated header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        if bytes[4] != VERSION {
            return Err(bad(&format!("unsupported version {}", bytes[4])));
        }
        let dtype = DType::from_code(bytes[5]).ok_or_else(|| bad("unknown dtype code"))?;
        let ndim = bytes[6] as usize;
        let header_len = 7 + 4 * ndim;
        if bytes.len() < header_len {
            return Err(bad("truncated dims"));
        }
        let shape: Vec<usize> = bytes[7..header_len]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        let numel: usize = shape.iter().product();
        let body = &bytes[header_len..];
        if body.len() != numel * dtype.size() {
            return Err(bad(&format!(
                "payload is {} bytes, header implies {}",
                body.len(),
                numel * dtype.size()
            )));
        }
        let dims = IxDyn(&shape);
        let tensor = match dtype {
            DType::F32 => Tensor::F32(from_vec(
                dims,
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            )),
            DType::F64 => Tensor::F64(from_vec(
                dims,
                body.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )),
            DType::U8 => Tensor::U8(from_vec(dims, body.to_vec())),
            DType::U16 => Tensor::U16(from_vec(
                dims,
                body.chunks_exact(2)
                    .map(|c| u16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            )),
        };
        Ok(tensor)
    }

    pub fn into_f32(self, origin: &Path) -> Result<ArrayD<f32>> {
        match self {
            Tensor::F32(a) => Ok(a),
            other => Err(Error::integrity(origin, format!("expected f32, found {:?}", other.dtype()))),
        }
    }

    pub fn into_f64(self, origin: &Path) -> Result<ArrayD<f64>> {
        match self {
            Tensor::F64(a) => Ok(a),
            other => Err(Error::integrity(origin, format!("expected f64, found {:?}", other.dtype()))),
        }
    }

    pub fn into_u16(self, origin: &Path) -> Result<ArrayD<u16>> {
        match self {
            Tensor::U16(a) => Ok(a),
            other => Err(Error::integrity(origin, format!("expected u16, found {:?}", other.dtype()))),
        }
    }
}

fn from_vec<T>(dims: IxDyn, data: Vec<T>) -> ArrayD<T> {
    ArrayD::from_shape_vec(dims, data).expect("length checked against header")
}

/// Writes bytes to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".to_string(),
    });
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    write_atomic(path, &tensor.to_bytes())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes, path)
}
