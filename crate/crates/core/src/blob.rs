//! Raw little-endian blobs shared by feature dumps and model checkpoints.
//!
//! Floats are stored as IEEE-754 binary32 and integers as u32, both
//! little-endian, with no header. Shapes live in the accompanying manifest.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub fn encode_f32(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(f32::to_le_bytes).collect()
}

pub fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn encode_u32(values: &[u32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_u32(bytes: &[u8]) -> Vec<u32> {
    bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(bytes).map_err(|e| Error::io(path, e))?;
    file.sync_all().map_err(|e| Error::io(path, e))
}

/// Reads a blob and checks it holds exactly `expected_len` bytes.
pub fn read_exact_len(path: &Path, expected_len: u64) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() as u64 != expected_len {
        return Err(Error::LengthMismatch {
            path: path.to_path_buf(),
            expected: expected_len,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes)
}

/// Reads `len` binary32 values into f64, checking the byte count.
pub fn read_f32_as_f64(path: &Path, len: usize) -> Result<Vec<f64>> {
    let bytes = read_exact_len(path, len as u64 * 4)?;
    Ok(decode_f32(&bytes).into_iter().map(f64::from).collect())
}

/// Writes f64 values as binary32. Callers that need a lossless round trip keep
/// their values on the f32 grid (see [`quantize_f32`]).
pub fn write_f64_as_f32(path: &Path, values: impl IntoIterator<Item = f64>) -> Result<()> {
    write_file(path, &encode_f32(values.into_iter().map(|v| v as f32)))
}

/// Rounds a value to the nearest binary32 and widens it back.
#[inline]
pub fn quantize_f32(v: f64) -> f64 {
    f64::from(v as f32)
}
