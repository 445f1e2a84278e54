//! `.evf` tensors: magic `EVF1`, a `u8` rank, `u32` little-endian dims, then
//! the row-major payload as little-endian `f64`.

use std::path::Path;

use evfuse_core::tensor::Tensor;

use crate::error::{CliError, Result};
use crate::fsio;

pub const MAGIC: &[u8; 4] = b"EVF1";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("bad magic, not an EVF1 tensor")]
    BadMagic,
    #[error("truncated header")]
    Truncated,
    #[error("payload is {got} bytes, dims need {expected}")]
    Length { expected: usize, got: usize },
    #[error("invalid tensor: {0}")]
    Tensor(String),
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 4 * t.rank() + 8 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(u8::try_from(t.rank()).expect("contract violation: rank above 255"));
    for &d in t.shape() {
        out.extend_from_slice(&u32::try_from(d).expect("contract violation: dimension above u32").to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor, DecodeError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(DecodeError::BadMagic);
    }
    let rank = *bytes.get(4).ok_or(DecodeError::Truncated)? as usize;
    let header = 5 + 4 * rank;
    if bytes.len() < header {
        return Err(DecodeError::Truncated);
    }
    let shape: Vec<usize> = bytes[5..header].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize).collect();
    let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or(DecodeError::Tensor("size overflows".into()))?;
    let expected = count.checked_mul(8).ok_or(DecodeError::Tensor("size overflows".into()))?;
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(DecodeError::Length { expected, got: payload.len() });
    }
    let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(shape, data).map_err(|e| DecodeError::Tensor(e.to_string()))
}

pub fn read(path: &Path) -> Result<Tensor> {
    decode(&fsio::read(path)?).map_err(|e| CliError::format(path, e))
}

pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    fsio::write_atomic(path, &encode(t))
}
