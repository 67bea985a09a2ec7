//! TFD1 field snapshots.
//!
//! Layout, all little-endian: magic `b"TFD1"`, `u32` version (= 1),
//! `u32 × 3` dims, `f64 × 3` origin, `f64` spacing, then `nx·ny·nz`
//! `f64` values in grid index order (z fastest).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Field, GridSpec};

pub const MAGIC: &[u8; 4] = b"TFD1";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 12 + 24 + 8;

pub fn encode(u: &Field) -> Vec<u8> {
    let g = u.grid();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * g.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for &n in &g.dims {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for &o in &g.origin {
        out.extend_from_slice(&o.to_le_bytes());
    }
    out.extend_from_slice(&g.spacing.to_le_bytes());
    for &v in u.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Field> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("bad magic, expected TFD1".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dims = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
    let origin = [f64_at(20), f64_at(28), f64_at(36)];
    let spacing = f64_at(44);
    let grid = GridSpec::new(dims, spacing, origin).map_err(|e| Error::Format(e.to_string()))?;
    let expected = HEADER_LEN + 8 * grid.len();
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "payload length {} does not match dims {:?} (expected {expected})",
            bytes.len(),
            dims
        )));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Field::new(grid, values)
}

pub fn write<W: Write>(mut w: W, u: &Field) -> Result<()> {
    w.write_all(&encode(u))?;
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<Field> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode(&buf)
}

pub fn save(path: impl AsRef<Path>, u: &Field) -> Result<()> {
    std::fs::write(path, encode(u))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Field> {
    decode(&std::fs::read(path)?)
}
