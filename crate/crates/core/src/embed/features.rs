//! Precomputed per-frame feature grids on disk.
//!
//! Layout, all little-endian: six `u32` header words (magic, version, F, H,
//! W, C) followed by `F*H*W*C` `f32` values in row-major `[F, H, W, C]`
//! order.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `b"STTF"` read as a little-endian `u32`.
pub const FEATURE_MAGIC: u32 = u32::from_le_bytes(*b"STTF");
pub const FEATURE_VERSION: u32 = 1;

pub fn write_features<W: Write>(out: &mut W, features: &Tensor<f32>) -> Result<()> {
    let s = features.shape();
    if s.len() != 4 {
        return Err(Error::input(format!("feature grid must be [F,H,W,C], got {s:?}")));
    }
    let mut buf = Vec::with_capacity(24 + 4 * features.numel());
    for word in [FEATURE_MAGIC, FEATURE_VERSION, s[0] as u32, s[1] as u32, s[2] as u32, s[3] as u32] {
        buf.extend_from_slice(&word.to_le_bytes());
    }
    for v in features.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf).map_err(|e| Error::io("<feature stream>", e))
}

pub fn read_features<R: Read>(input: &mut R) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<feature stream>", e))?;
    if bytes.len() < 24 {
        return Err(Error::input("feature file shorter than its header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(0) != FEATURE_MAGIC {
        return Err(Error::input("feature file has wrong magic"));
    }
    if word(1) != FEATURE_VERSION {
        return Err(Error::input(format!("unsupported feature file version {}", word(1))));
    }
    let shape: Vec<usize> = (2..6).map(|i| word(i) as usize).collect();
    let count: usize = shape.iter().product();
    if bytes.len() != 24 + 4 * count {
        return Err(Error::input(format!(
            "feature file holds {} payload bytes, shape {shape:?} needs {}",
            bytes.len() - 24,
            4 * count
        )));
    }
    let data = bytes[24..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::from_vec(shape, data)?)
}
