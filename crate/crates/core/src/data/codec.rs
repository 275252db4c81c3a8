//! Binary feature-file codec.
//!
//! Layout (little-endian): magic `FSEQ`, version u32 = 1, T u32, D u32,
//! then T*D f32 values row-major. Storage is f32; in-memory compute is f64.

use std::fs;
use std::path::Path;

use crate::data::FeatureSequence;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"FSEQ";
pub const FEATURE_VERSION: u32 = 1;

pub fn write_feature_file(path: &Path, seq: &FeatureSequence) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + seq.values().len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(seq.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(seq.dim() as u32).to_le_bytes());
    for &v in seq.values() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<FeatureSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let decode_err = |offset: usize, detail: String| Error::Decode {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail,
    };

    if bytes.len() < 16 {
        return Err(decode_err(
            bytes.len(),
            format!("header needs 16 bytes, file has {}", bytes.len()),
        ));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(decode_err(0, format!("bad magic {:?}", &bytes[0..4])));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != FEATURE_VERSION {
        return Err(decode_err(4, format!("unsupported version {version}")));
    }
    let t = u32_at(8) as usize;
    let d = u32_at(12) as usize;
    if t == 0 || d == 0 {
        return Err(decode_err(8, format!("degenerate dimensions {t}x{d}")));
    }
    let want = 16 + t * d * 4;
    if bytes.len() != want {
        return Err(decode_err(
            bytes.len().min(want),
            format!(
                "payload for {t}x{d} needs {want} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    let mut values = Vec::with_capacity(t * d);
    for i in 0..t * d {
        let off = 16 + i * 4;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        if !v.is_finite() {
            return Err(decode_err(off, format!("non-finite value {v}")));
        }
        values.push(v as f64);
    }
    FeatureSequence::new(t, d, values)
}
