//! Raw tensor file: magic `MCVV`, little-endian `u32` rank, `u32` extents,
//! then the little-endian `f32` payload in row-major order. Used for clips
//! and checkpoint parameters alike.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MCVV";

pub fn encode_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.numel());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let bad = |reason: &str| Error::ClipFormat {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let u32_at = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| bad("truncated header"))
    };
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(bad("bad magic"));
    }
    let rank = u32_at(4)? as usize;
    if rank == 0 || rank > 16 {
        return Err(bad("unsupported rank"));
    }
    let shape = (0..rank)
        .map(|i| u32_at(8 + 4 * i).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 8 + 4 * rank;
    let numel: usize = shape.iter().product();
    let payload = &bytes[start..];
    if payload.len() != numel * 4 {
        return Err(bad(&format!(
            "payload has {} bytes, shape {shape:?} needs {}",
            payload.len(),
            numel * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(&shape, data).map_err(|e| bad(&e.to_string()))
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}
