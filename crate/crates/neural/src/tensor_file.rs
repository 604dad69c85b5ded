//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes      | content                                  |
//! |------------|------------------------------------------|
//! | 0..8       | magic `EVFTENS1`                         |
//! | 8..12      | dtype code, `u32` (1 = IEEE-754 binary64) |
//! | 12..16     | rank, `u32`                              |
//! | 16..16+8r  | dims, `u64` each                         |
//! | rest       | row-major `f64` payload                  |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::NeuralError;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"EVFTENS1";
pub const DTYPE_F64: u32 = 1;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.rank() + 8 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&DTYPE_F64.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor, NeuralError> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(NeuralError::BadMagic);
    }
    let header = |at: usize, len: usize| -> Result<&[u8], NeuralError> {
        bytes.get(at..at + len).ok_or(NeuralError::Truncated {
            expected: at + len,
            found: bytes.len(),
        })
    };
    let dtype = u32::from_le_bytes(header(8, 4)?.try_into().unwrap());
    if dtype != DTYPE_F64 {
        return Err(NeuralError::UnsupportedDtype(dtype));
    }
    let rank = u32::from_le_bytes(header(12, 4)?.try_into().unwrap()) as usize;
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let d = u64::from_le_bytes(header(16 + 8 * i, 8)?.try_into().unwrap());
        shape.push(d as usize);
    }
    let start = 16 + 8 * rank;
    let count: usize = shape.iter().product();
    let payload = &bytes[start..];
    if payload.len() != 8 * count {
        return Err(NeuralError::Truncated {
            expected: 8 * count,
            found: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

pub fn tensor_write(t: &Tensor, path: impl AsRef<Path>) -> Result<(), NeuralError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn tensor_read(path: impl AsRef<Path>) -> Result<Tensor, NeuralError> {
    decode(&fs::read(path)?)
}
