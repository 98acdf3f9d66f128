//! `SGT1` tensor files.
//!
//! Layout: the four bytes `SGT1`, the rank as a little-endian `u32`, one
//! little-endian `u32` per dimension, then the payload as little-endian
//! `f32` in row-major order. Nothing else, no padding.

use std::path::Path;

use sgs_core::Tensor;

use crate::error::{read_file, write_file, HarnessError, Result};

pub const MAGIC: &[u8; 4] = b"SGT1";

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses an `SGT1` buffer. Errors are plain messages; callers attach the
/// file name.
pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let mut words = bytes
        .get(4..)
        .ok_or("truncated header")?
        .chunks(4);
    if &bytes[..4] != MAGIC {
        return Err(format!("bad magic {:?}", &bytes[..4]));
    }
    let mut next_u32 = |what: &str| -> std::result::Result<u32, String> {
        match words.next() {
            Some(w) if w.len() == 4 => Ok(u32::from_le_bytes(w.try_into().unwrap())),
            _ => Err(format!("truncated {what}")),
        }
    };
    let rank = next_u32("rank")? as usize;
    if rank == 0 {
        return Err("rank 0 tensors are not supported".into());
    }
    let shape = (0..rank)
        .map(|_| next_u32("shape").map(|d| d as usize))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let count = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or("shape overflows")?;
    let start = 8 + 4 * rank;
    let payload = &bytes[start..];
    if payload.len() != 4 * count {
        return Err(format!(
            "payload holds {} bytes, shape {shape:?} needs {}",
            payload.len(),
            4 * count
        ));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|w| f32::from_le_bytes(w.try_into().unwrap()))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(format!("non-finite value at flat index {i}"));
    }
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    write_file(path, &encode(t))
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    decode(&read_file(path)?).map_err(|m| HarnessError::format(path, m))
}
