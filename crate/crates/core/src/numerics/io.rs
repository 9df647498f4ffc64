//! Flat little-endian tensor files.
//!
//! Layout: `b"WVT1"`, rank as `u64`, one `u64` per extent, then the `f64`
//! payload in row-major order. Everything little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"WVT1";

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * t.rank() + 8 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |reason: String| Error::Format {
        kind: "tensor",
        path: path.to_path_buf(),
        reason,
    };
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header".into()))?;
    if &magic != TENSOR_MAGIC {
        return Err(bad(format!("magic {magic:?}")));
    }
    let mut word = || -> Result<u64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(|_| bad("truncated header".into()))?;
        Ok(u64::from_le_bytes(b))
    };
    let rank = word()? as usize;
    if rank > 16 {
        return Err(bad(format!("implausible rank {rank}")));
    }
    let shape = (0..rank).map(|_| word().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let header = 12 + 8 * rank;
    let payload = &bytes[header..];
    if payload.len() != 8 * n {
        return Err(bad(format!("payload has {} bytes, expected {}", payload.len(), 8 * n)));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&shape, data).map_err(|e| bad(e.to_string()))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?, path)
}
