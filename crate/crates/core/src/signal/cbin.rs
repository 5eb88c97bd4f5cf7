//! `.cbin` complex signal files.
//!
//! Layout (little-endian): magic `"CSIG"`, `u32` version = 1, `u64` sample
//! count, then `count × (f32 re, f32 im)`.

use std::path::Path;

use num_complex::Complex64;

use super::ComplexVector;
use crate::error::{Error, Result};

pub const CBIN_MAGIC: &[u8; 4] = b"CSIG";
pub const CBIN_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode_cbin(v: &ComplexVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * v.len());
    out.extend_from_slice(CBIN_MAGIC);
    out.extend_from_slice(&CBIN_VERSION.to_le_bytes());
    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for z in v.iter() {
        out.extend_from_slice(&(z.re as f32).to_le_bytes());
        out.extend_from_slice(&(z.im as f32).to_le_bytes());
    }
    out
}

pub fn decode_cbin(bytes: &[u8]) -> Result<ComplexVector> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format("cbin", format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != CBIN_MAGIC {
        return Err(Error::format("cbin", "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CBIN_VERSION {
        return Err(Error::format("cbin", format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() != len.saturating_mul(8) {
        return Err(Error::format("cbin", format!("header declares {len} samples but body holds {} bytes", body.len())));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes(c[..4].try_into().unwrap());
            let im = f32::from_le_bytes(c[4..].try_into().unwrap());
            Complex64::new(re as f64, im as f64)
        })
        .collect();
    ComplexVector::new(values).map_err(|e| Error::format("cbin", e.to_string()))
}

pub fn write_cbin(path: impl AsRef<Path>, v: &ComplexVector) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_cbin(v)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_cbin(path: impl AsRef<Path>) -> Result<ComplexVector> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_cbin(&bytes)
}
