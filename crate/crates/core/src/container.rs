//! The CSMT tensor container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes            | field                                   |
//! |------------------|-----------------------------------------|
//! | 4                | magic `b"CSMT"`                         |
//! | 2                | version, `u16` = 1                      |
//! | 1                | dtype: 1 = f32, 2 = f64, 3 = u32        |
//! | 4                | ndim, `u32`                             |
//! | 4 * ndim         | dims, `u32` each                        |
//! | elem * prod(dims)| payload, row-major                      |
//!
//! Trailing bytes after the payload are rejected.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CSMT";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    F64 = 2,
    U32 = 3,
}

impl DType {
    fn from_code(code: u8) -> Option<DType> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            3 => Some(DType::U32),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 | DType::U32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U32(_) => DType::U32,
        }
    }
}

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<u32>,
    data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<u32>, data: TensorData) -> Result<Self> {
        let expected = dims.iter().map(|&d| d as usize).product::<usize>();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "dims {dims:?} hold {expected} elements, payload has {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    /// Stores `values` as f32, rounding each to the nearest representable value.
    pub fn f32_from_f64(dims: Vec<u32>, values: &[f64]) -> Result<Self> {
        Tensor::new(dims, TensorData::F32(values.iter().map(|&v| v as f32).collect()))
    }

    pub fn f64(dims: Vec<u32>, values: Vec<f64>) -> Result<Self> {
        Tensor::new(dims, TensorData::F64(values))
    }

    pub fn u32(dims: Vec<u32>, values: Vec<u32>) -> Result<Self> {
        Tensor::new(dims, TensorData::U32(values))
    }

    pub fn dims(&self) -> &[u32] {
        &self.dims
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    /// Floating payloads widened to f64; u32 payloads converted exactly.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::U32(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dtype = self.data.dtype();
        let mut out =
            Vec::with_capacity(11 + 4 * self.dims.len() + dtype.width() * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(dtype as u8);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    /// Parses a container; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4).ok_or_else(|| fail("truncated header".into()))?;
        if magic != MAGIC {
            return Err(fail(format!("bad magic {magic:02x?}")));
        }
        let version = u16::from_le_bytes(r.array().ok_or_else(|| fail("truncated header".into()))?);
        if version != VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        let code = r.take(1).ok_or_else(|| fail("truncated header".into()))?[0];
        let dtype = DType::from_code(code).ok_or_else(|| fail(format!("unknown dtype code {code}")))?;
        let ndim = u32::from_le_bytes(r.array().ok_or_else(|| fail("truncated header".into()))?);
        let mut dims = Vec::with_capacity(ndim.min(16) as usize);
        for i in 0..ndim {
            let d = r
                .array()
                .ok_or_else(|| fail(format!("truncated dims at axis {i}")))?;
            dims.push(u32::from_le_bytes(d));
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| fail("element count overflows".into()))?;
        let payload_len = count
            .checked_mul(dtype.width())
            .ok_or_else(|| fail("payload size overflows".into()))?;
        let payload = r.take(payload_len).ok_or_else(|| {
            fail(format!(
                "payload needs {payload_len} bytes, {} remain",
                bytes.len() - r.pos
            ))
        })?;
        if r.pos != bytes.len() {
            return Err(fail(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(
                payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DType::F64 => TensorData::F64(
                payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DType::U32 => TensorData::U32(
                payload.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
        };
        Ok(Tensor { dims, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Tensor::from_bytes(&bytes, path)
    }

    /// Checks the shape against `expected`, naming `what` on mismatch.
    pub fn expect_dims(&self, expected: &[u32], what: &str) -> Result<()> {
        if self.dims != expected {
            return Err(Error::dim(format!(
                "{what}: expected dims {expected:?}, found {:?}",
                self.dims
            )));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn array<const N: usize>(&mut self) -> Option<[u8; N]> {
        self.take(N).map(|s| s.try_into().unwrap())
    }
}
