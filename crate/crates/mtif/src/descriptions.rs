//! Description caches (`<pair-id>.text.json`) and precomputed embedding
//! containers (`<pair-id>.emb`).
//!
//! The embedding container is `MTIFEMB1`, a little-endian `u32` level count,
//! then per level `u32 rows`, `u32 cols` and `rows * cols` little-endian `f32`.

use std::io::{Read, Write};
use std::path::Path;

use mtif_core::text::{GrainedDescriptions, TextFeatureSet, TextMatrix};

use crate::error::{format_err, io_err, HarnessError, Result};

pub const EMB_MAGIC: &[u8; 8] = b"MTIFEMB1";

pub fn load_description_cache(path: &Path) -> Result<GrainedDescriptions> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let desc: GrainedDescriptions = serde_json::from_str(&text).map_err(|e| {
        HarnessError::Core(mtif_core::Error::Schema(format!("{}: {e}", path.display())))
    })?;
    desc.validate()
        .map_err(|e| HarnessError::Core(mtif_core::Error::Schema(format!("{}: {e}", path.display()))))?;
    Ok(desc)
}

pub fn save_description_cache(path: &Path, desc: &GrainedDescriptions) -> Result<()> {
    let json = serde_json::to_string_pretty(desc).map_err(|e| format_err(path, e))?;
    std::fs::write(path, json + "\n").map_err(io_err(path))
}

pub fn write_embeddings(path: &Path, set: &TextFeatureSet) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(EMB_MAGIC);
    buf.extend_from_slice(&(set.levels.len() as u32).to_le_bytes());
    for m in &set.levels {
        buf.extend_from_slice(&(m.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(m.cols as u32).to_le_bytes());
        for v in &m.data {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}

fn read_u32(bytes: &[u8], at: &mut usize, path: &Path) -> Result<u32> {
    let end = *at + 4;
    let chunk = bytes.get(*at..end).ok_or_else(|| format_err(path, "truncated embedding container"))?;
    *at = end;
    Ok(u32::from_le_bytes(chunk.try_into().unwrap()))
}

pub fn read_embeddings(path: &Path) -> Result<TextFeatureSet> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    if bytes.get(..8) != Some(EMB_MAGIC.as_slice()) {
        return Err(format_err(path, "not an embedding container"));
    }
    let mut at = 8;
    let levels = read_u32(&bytes, &mut at, path)?;
    let mut out = Vec::new();
    for _ in 0..levels {
        let rows = read_u32(&bytes, &mut at, path)? as usize;
        let cols = read_u32(&bytes, &mut at, path)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let v = f32::from_bits(read_u32(&bytes, &mut at, path)?);
            data.push(v as f64);
        }
        out.push(TextMatrix::new(rows, cols, data).map_err(|e| format_err(path, e))?);
    }
    if at != bytes.len() {
        return Err(format_err(path, "trailing bytes after the last level"));
    }
    TextFeatureSet::new(out).map_err(|e| format_err(path, e))
}
