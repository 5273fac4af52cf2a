//! Binary tensor files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! b"SCAM" | u32 version (=1) | u8 dtype (0 = f32) | u8 rank | rank × u64 extents | payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::Tensor;

pub const MAGIC: &[u8; 4] = b"SCAM";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

pub fn encode(tensor: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 8 * tensor.rank() + 4 * tensor.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(tensor.rank() as u8);
    for &extent in tensor.shape() {
        out.extend_from_slice(&(extent as u64).to_le_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a tensor; the error message describes what is wrong with the
/// bytes, callers attach the file path.
pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let mut cursor = bytes;
    let mut take = |n: usize, what: &str| -> std::result::Result<&[u8], String> {
        if cursor.len() < n {
            return Err(format!("truncated while reading {what}"));
        }
        let (head, tail) = cursor.split_at(n);
        cursor = tail;
        Ok(head)
    };
    if take(4, "magic")? != MAGIC {
        return Err("bad magic bytes".into());
    }
    let version = u32::from_le_bytes(take(4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let dtype = take(1, "dtype")?[0];
    if dtype != DTYPE_F32 {
        return Err(format!("unsupported dtype code {dtype}"));
    }
    let rank = take(1, "rank")?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let extent = u64::from_le_bytes(take(8, "extents")?.try_into().unwrap());
        shape.push(usize::try_from(extent).map_err(|_| "extent overflows usize".to_string())?);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or("element count overflows")?;
    let payload = take(numel.checked_mul(4).ok_or("payload size overflows")?, "payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if !cursor.is_empty() {
        return Err(format!("{} trailing bytes after payload", cursor.len()));
    }
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn write_tensor(path: &Path, tensor: &Tensor<f32>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode(tensor)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|msg| Error::data(path, msg))
}
