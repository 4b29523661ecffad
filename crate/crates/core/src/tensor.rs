//! Dense row-major tensors and the TNSR interchange format.
//!
//! Layout on the wire (integers little-endian):
//!
//! ```text
//! magic    4 bytes   "TNSR"
//! version  u32       1
//! dtype    u8        1 = f32, 2 = f64
//! ndim     u8        1..=8
//! reserved 2 bytes   zero
//! dims     ndim x u64
//! payload  row-major values in the declared dtype
//! ```
//!
//! Values are always held as `f64` in memory. A tensor read from an f32 file
//! remembers its dtype so that writing it back reproduces the same bytes.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u32 = 1;
pub const MAX_NDIM: usize = 8;
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Dense n-dimensional real array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    dtype: DType,
}

impl Tensor {
    /// Builds a tensor, checking that `data.len()` matches the shape and every
    /// value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        validate_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Validation(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite value at offset {pos}")));
        }
        Ok(Self {
            shape,
            data,
            dtype: DType::F64,
        })
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    /// Internal constructor for values produced by arithmetic on valid
    /// tensors. Shape is trusted; finiteness is checked in debug builds.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            dtype: DType::F64,
        }
    }

    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        validate_shape(&shape)?;
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
            dtype: self.dtype,
        })
    }

    /// `self * a + b` elementwise, returning a new tensor.
    pub fn scale_shift(&self, a: f64, b: f64) -> Self {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| v * a + b).collect(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm of the flattened data.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Interprets a rank-3 tensor as `(channels, height, width)`.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [c, h, w] => Ok((*c, *h, *w)),
            other => Err(Error::Shape(format!("expected c x h x w tensor, got {other:?}"))),
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_NDIM {
        return Err(Error::Validation(format!(
            "rank must be in 1..={MAX_NDIM}, got {}",
            shape.len()
        )));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::Validation(format!("zero-sized dimension in {shape:?}")));
    }
    Ok(())
}

/// Serializes `t` in TNSR format, returning the number of bytes written.
pub fn write_tensor<W: Write>(t: &Tensor, mut dst: W) -> Result<usize> {
    if !t.all_finite() {
        return Err(Error::Validation("refusing to write non-finite values".into()));
    }
    let ndim = t.rank();
    let mut header = Vec::with_capacity(HEADER_LEN + 8 * ndim);
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.push(t.dtype.code());
    header.push(ndim as u8);
    header.extend_from_slice(&[0, 0]);
    for &d in &t.shape {
        header.extend_from_slice(&(d as u64).to_le_bytes());
    }

    let mut payload = Vec::with_capacity(t.len() * t.dtype.size());
    match t.dtype {
        DType::F64 => {
            for v in &t.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        DType::F32 => {
            for v in &t.data {
                let narrowed = *v as f32;
                if !narrowed.is_finite() {
                    return Err(Error::Validation(format!("{v} overflows f32")));
                }
                payload.extend_from_slice(&narrowed.to_le_bytes());
            }
        }
    }

    dst.write_all(&header)?;
    dst.write_all(&payload)?;
    dst.flush()?;
    Ok(header.len() + payload.len())
}

/// Parses a TNSR stream. The source must contain exactly one tensor.
pub fn read_tensor<R: Read>(mut src: R) -> Result<Tensor> {
    let mut header = [0u8; HEADER_LEN];
    src.read_exact(&mut header)
        .map_err(|e| truncated_or_io(e, "header"))?;
    if &header[0..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &header[0..4])));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dtype = DType::from_code(header[8])?;
    let ndim = header[9] as usize;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(Error::Format(format!("ndim {ndim} out of range")));
    }
    if header[10] != 0 || header[11] != 0 {
        return Err(Error::Format("reserved bytes must be zero".into()));
    }

    let mut dims_raw = vec![0u8; 8 * ndim];
    src.read_exact(&mut dims_raw)
        .map_err(|e| truncated_or_io(e, "dimensions"))?;
    let mut shape = Vec::with_capacity(ndim);
    for chunk in dims_raw.chunks_exact(8) {
        let d = u64::from_le_bytes(chunk.try_into().unwrap());
        let d = usize::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?;
        if d == 0 {
            return Err(Error::Format("zero-sized dimension".into()));
        }
        shape.push(d);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("element count overflows".into()))?;
    let expected = count
        .checked_mul(dtype.size())
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;

    let mut payload = Vec::new();
    src.read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes, header requires {expected}",
            payload.len()
        )));
    }

    let data: Vec<f64> = match dtype {
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    Ok(Tensor::new(shape, data)?.with_dtype(dtype))
}

fn truncated_or_io(e: std::io::Error, what: &str) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format(format!("truncated {what}"))
    } else {
        Error::Io(e)
    }
}

pub fn to_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_tensor(t, &mut buf)?;
    Ok(buf)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
    read_tensor(bytes)
}
