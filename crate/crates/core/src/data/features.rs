//! Frame-feature files: a 16-byte header (`b"VSFT"`, format version, rows,
//! cols; all little-endian `u32`) followed by `rows * cols` little-endian
//! `f32` values in row-major order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 4] = b"VSFT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode_features(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.as_slice().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::validation(
            "header",
            format!("truncated: {} bytes, header needs {HEADER_LEN}", bytes.len()),
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::validation("magic", "not a frame-feature file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FORMAT_VERSION {
        return Err(Error::validation("version", format!("unsupported version {version}")));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let expected = HEADER_LEN + 4 * rows * cols;
    if bytes.len() != expected {
        return Err(Error::validation(
            "data",
            format!(
                "truncated or oversized: {} bytes for {rows}x{cols}, expected {expected}",
                bytes.len()
            ),
        ));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn write_features(path: &Path, m: &Matrix) -> Result<()> {
    std::fs::write(path, encode_features(m)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Matrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}

/// Rounds every entry to the nearest `f32`, so that the matrix survives a
/// write/read cycle bit for bit.
pub fn round_to_f32(m: &mut Matrix) {
    for v in m.as_mut_slice() {
        *v = *v as f32 as f64;
    }
}
