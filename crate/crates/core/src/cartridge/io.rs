//! Cartridge file format.
//!
//! ```text
//! "CRTG" | u32 version | u32 L | u32 h | u32 p | u32 d_head | u8 dtype
//!        | keys [L×h×p×d_head] | values [L×h×p×d_head]   (little-endian)
//!        | u32 meta_len | meta JSON (UTF-8)
//! ```
//!
//! dtype 0 stores 32-bit floats, 1 stores 64-bit floats.

use std::fs;
use std::path::Path;

use crate::error::{LabError, Result};
use crate::model::KvCache;
use crate::numerics::{Dtype, Real};

use super::{Cartridge, CartridgeMeta};

pub const CARTRIDGE_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CRTG";
const HEADER_LEN: usize = 4 + 4 + 4 * 4 + 1;

pub fn encode_cartridge<T: Real>(c: &Cartridge<T>) -> Result<Vec<u8>> {
    let (l, h, p, dh) = c.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + 2 * c.keys().len() * T::DTYPE.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CARTRIDGE_FORMAT_VERSION.to_le_bytes());
    for v in [l, h, p, dh] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(T::DTYPE.tag());
    for x in c.keys().iter().chain(c.values()) {
        x.put_le(&mut out);
    }
    let meta = serde_json::to_vec(c.meta())?;
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    Ok(out)
}

fn read_tensor<T: Real>(bytes: &[u8], dtype: Dtype) -> Vec<T> {
    match dtype {
        Dtype::F32 => bytes.chunks_exact(4).map(|b| T::of(f32::get_le(b) as f64)).collect(),
        Dtype::F64 => bytes.chunks_exact(8).map(|b| T::of(f64::get_le(b))).collect(),
    }
}

/// Decodes a cartridge, converting to `T` if the stored dtype differs.
pub fn decode_cartridge<T: Real>(bytes: &[u8]) -> Result<Cartridge<T>> {
    let fmt = |m: &str| LabError::Format(m.to_string());
    if bytes.len() < HEADER_LEN {
        return Err(fmt("cartridge file shorter than header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(fmt("bad cartridge magic"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != CARTRIDGE_FORMAT_VERSION {
        return Err(LabError::UnsupportedVersion {
            what: "cartridge",
            found: version,
            expected: CARTRIDGE_FORMAT_VERSION,
        });
    }
    let (l, h, p, dh) = (
        u32_at(8) as usize,
        u32_at(12) as usize,
        u32_at(16) as usize,
        u32_at(20) as usize,
    );
    let dtype = Dtype::from_tag(bytes[24]).ok_or_else(|| fmt("unknown dtype tag"))?;
    let n = l
        .checked_mul(h)
        .and_then(|x| x.checked_mul(p))
        .and_then(|x| x.checked_mul(dh))
        .ok_or_else(|| fmt("dimension overflow"))?;
    let tensor_bytes = n * dtype.width();
    let meta_off = HEADER_LEN + 2 * tensor_bytes;
    if bytes.len() < meta_off + 4 {
        return Err(fmt("cartridge file truncated in tensors"));
    }
    let meta_len = u32_at(meta_off) as usize;
    if bytes.len() != meta_off + 4 + meta_len {
        return Err(fmt("cartridge meta block length mismatch"));
    }
    let meta: CartridgeMeta = serde_json::from_slice(&bytes[meta_off + 4..])
        .map_err(|e| LabError::Format(format!("bad cartridge meta: {e}")))?;
    let keys = read_tensor(&bytes[HEADER_LEN..HEADER_LEN + tensor_bytes], dtype);
    let values = read_tensor(&bytes[HEADER_LEN + tensor_bytes..meta_off], dtype);
    let kv = KvCache::from_tensors(l, h, dh, p, keys, values)?;
    Cartridge::new(kv, meta).map_err(|e| LabError::Format(e.to_string()))
}

pub fn save_cartridge<T: Real>(c: &Cartridge<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_cartridge(c)?)?;
    Ok(())
}

pub fn load_cartridge<T: Real>(path: &Path) -> Result<Cartridge<T>> {
    decode_cartridge(&fs::read(path)?)
}
