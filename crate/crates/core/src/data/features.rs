//! Binary clip-feature files.
//!
//! Layout (little endian): `b"MRTF"`, `u32` version (1), `u32` n, `u32` d,
//! then `n·d` row-major `f32` values. Values are widened to `f64` on load.

use std::fs;
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{MrtError, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"MRTF";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode_features(t: &Tensor) -> Result<Vec<u8>> {
    if t.ndim() != 2 {
        return Err(MrtError::dim("encode_features", t.shape(), &[0, 0]));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |msg: String| MrtError::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("header truncated at {} bytes", bytes.len())));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(bad(format!("bad magic {:?}", &bytes[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let (n, d) = (word(8) as usize, word(12) as usize);
    let expected = n * d * 4;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(bad(format!(
            "payload truncated: {} of {expected} bytes for {n}x{d}",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(bad(format!(
            "{} trailing bytes after {n}x{d} payload",
            payload.len() - expected
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(vec![n, d], data)
}

pub fn load_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| MrtError::io(path, e))?;
    decode_features(&bytes, path)
}

pub fn write_features(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_features(t)?).map_err(|e| MrtError::io(path, e))
}
