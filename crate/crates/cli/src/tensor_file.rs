//! Binary tensor container.
//!
//! Layout (all integers `u32` little-endian):
//!
//! | offset | field                         |
//! |--------|-------------------------------|
//! | 0      | magic `CCAT`                  |
//! | 4      | version (1)                   |
//! | 8      | dtype code (0 = f32, 1 = f64) |
//! | 12     | ndim (always 4)               |
//! | 16     | four extents N, C, H, W       |
//! | 32     | row-major little-endian data  |

use std::path::Path;

use cca_core::{DType, Tensor};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"CCAT";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;

/// A tensor of either element type.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            Self::F32(_) => DType::F32,
            Self::F64(_) => DType::F64,
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        match self {
            Self::F32(t) => t.dims(),
            Self::F64(t) => t.dims(),
        }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        match self {
            Self::F32(t) => t.clone(),
            Self::F64(t) => t.cast(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        match self {
            Self::F32(t) => t.cast(),
            Self::F64(t) => t.clone(),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        Self::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        Self::F64(t)
    }
}

fn dtype_code(d: DType) -> u32 {
    match d {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

fn header(dtype: DType, dims: [usize; 4]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    for v in [VERSION, dtype_code(dtype), 4] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for d in dims {
        let d = u32::try_from(d).map_err(|_| CliError::Validation(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(out)
}

pub fn encode(t: &AnyTensor) -> Result<Vec<u8>> {
    let mut out = header(t.dtype(), t.dims())?;
    match t {
        AnyTensor::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        AnyTensor::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], context: &str) -> Result<AnyTensor> {
    let err = |offset: usize, message: String| CliError::Format {
        context: context.to_string(),
        offset,
        message,
    };
    let word = |offset: usize| -> Result<u32> {
        bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| err(bytes.len(), format!("truncated header (expected {HEADER_LEN} bytes)")))
    };
    match bytes.get(0..4) {
        Some(m) if m == MAGIC => {}
        Some(m) => return Err(err(0, format!("bad magic {m:02x?}, expected \"CCAT\""))),
        None => return Err(err(bytes.len(), "truncated magic".into())),
    }
    let version = word(4)?;
    if version != VERSION {
        return Err(err(4, format!("unsupported version {version}")));
    }
    let dtype = match word(8)? {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(err(8, format!("unknown dtype code {other}"))),
    };
    let ndim = word(12)?;
    if ndim != 4 {
        return Err(err(12, format!("ndim {ndim}, expected 4")));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = word(16 + 4 * i)? as usize;
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(dtype.size_of()))
        .ok_or_else(|| err(16, "payload size overflows".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != count {
        return Err(err(
            HEADER_LEN + payload.len().min(count),
            format!("payload is {} bytes, header requires {count}", payload.len()),
        ));
    }
    let t = match dtype {
        DType::F32 => AnyTensor::F32(Tensor::new(
            dims,
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        )?),
        DType::F64 => AnyTensor::F64(Tensor::new(
            dims,
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        )?),
    };
    Ok(t)
}

pub fn save(path: &Path, t: &AnyTensor) -> Result<()> {
    std::fs::write(path, encode(t)?).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> Result<AnyTensor> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = AnyTensor::F64(Tensor::zeros([1, 2, 3, 4]));
        let b = encode(&t).unwrap();
        assert_eq!(&b[0..4], b"CCAT");
        assert_eq!(b[8], 1);
        assert_eq!(b[12], 4);
        assert_eq!(&b[16..32], &[1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, 4, 0, 0, 0]);
        assert_eq!(b.len(), 32 + 24 * 8);
    }

    #[test]
    fn errors_carry_offsets() {
        let t = AnyTensor::F32(Tensor::zeros([1, 1, 2, 2]));
        let good = encode(&t).unwrap();
        let offset = |b: &[u8]| match decode(b, "t") {
            Err(CliError::Format { offset, .. }) => offset,
            other => panic!("{other:?}"),
        };
        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(offset(&bad), 0);
        let mut bad = good.clone();
        bad[8] = 7;
        assert_eq!(offset(&bad), 8);
        let mut bad = good.clone();
        bad[12] = 3;
        assert_eq!(offset(&bad), 12);
        assert_eq!(offset(&good[..good.len() - 1]), good.len() - 1);
        assert_eq!(offset(&good[..10]), 10);
    }
}
