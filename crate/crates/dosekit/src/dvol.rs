//! `.dvol`: one scalar volume.
//!
//! Layout, all little-endian: magic `DVOL`, `u16` version, three `u32`
//! dims, three `f32` spacings (mm), then `nx*ny*nz` `f32` values in raster
//! order (x fastest).

use std::io::{Read, Write};
use std::path::Path;

use dosekit_core::volume::VoxelGrid;

use crate::error::{FormatError, KitError, KitResult};
use crate::fsutil;

pub const MAGIC: [u8; 4] = *b"DVOL";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 12 + 12;

pub fn encode(grid: &VoxelGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * grid.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in grid.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in grid.spacing() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for v in grid.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode(bytes: &[u8]) -> Result<VoxelGrid, FormatError> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic {
            expected: MAGIC,
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated {
            needed: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let dims = [u32_at(bytes, 6) as usize, u32_at(bytes, 10) as usize, u32_at(bytes, 14) as usize];
    let spacing = [
        f32::from_bits(u32_at(bytes, 18)),
        f32::from_bits(u32_at(bytes, 22)),
        f32::from_bits(u32_at(bytes, 26)),
    ];
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| FormatError::Header(format!("dims {dims:?} overflow")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < n {
        return Err(FormatError::Truncated {
            needed: HEADER_LEN + n,
            found: bytes.len(),
        });
    }
    if payload.len() != n {
        return Err(FormatError::LengthMismatch {
            expected: n,
            found: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    VoxelGrid::new(dims, spacing, data).map_err(|e| FormatError::Header(e.to_string()))
}

pub fn write_to(w: &mut impl Write, grid: &VoxelGrid) -> std::io::Result<()> {
    w.write_all(&encode(grid))
}

pub fn read_from(r: &mut impl Read) -> Result<VoxelGrid, FormatError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode(&buf)
}

pub fn write(path: &Path, grid: &VoxelGrid) -> KitResult<()> {
    fsutil::write_atomic(path, &encode(grid))
}

pub fn read(path: &Path) -> KitResult<VoxelGrid> {
    let bytes = std::fs::read(path).map_err(|e| KitError::io(path, e))?;
    decode(&bytes).map_err(|e| KitError::format(path, e))
}
