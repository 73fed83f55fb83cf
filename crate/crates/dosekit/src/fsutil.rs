use std::io::Write;
use std::path::Path;

use crate::error::{KitError, KitResult};

/// Writes `bytes` to a temporary file next to `path`, then renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> KitResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| KitError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| KitError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| KitError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| KitError::io(path, e))?;
    tmp.persist(path).map_err(|e| KitError::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> KitResult<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| KitError::parse(path, e.to_string()))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> KitResult<T> {
    let bytes = std::fs::read(path).map_err(|e| KitError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| KitError::parse(path, e.to_string()))
}

pub fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f32_from_bytes(path: &Path, bytes: &[u8]) -> KitResult<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(KitError::parse(path, format!("{} bytes is not a whole number of f32 values", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}
