//! Embedding database file. Layout, all little-endian:
//!
//! ```text
//! "EVDB" | version u8 | K u32 | count u32
//! | count x (sample_id u64 | pose 6 x f64 | modality u8 | K x f32)
//! ```

use std::fs;
use std::path::Path;

use super::DbEntry;
use crate::datamodel::Pose;
use crate::encoders::Modality;
use crate::error::{Error, Result};

pub const EVDB_MAGIC: &[u8; 4] = b"EVDB";
pub const EVDB_VERSION: u8 = 1;

pub fn encode_evdb(entries: &[DbEntry]) -> Result<Vec<u8>> {
    let k = entries.first().map_or(0, |e| e.ev.len());
    if let Some(bad) = entries.iter().find(|e| e.ev.len() != k) {
        return Err(Error::shape(
            "evdb",
            format!(
                "entry {} has length {}, expected {k}",
                bad.sample_id,
                bad.ev.len()
            ),
        ));
    }
    let mut out = Vec::with_capacity(13 + entries.len() * (57 + 4 * k));
    out.extend_from_slice(EVDB_MAGIC);
    out.push(EVDB_VERSION);
    out.extend_from_slice(&(k as u32).to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&e.sample_id.to_le_bytes());
        for v in e.pose.to_array() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(e.modality.to_u8());
        for v in &e.ev {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses an EVDB image; `path` only labels errors. Returns `(K, entries)`.
pub fn decode_evdb(bytes: &[u8], path: &Path) -> Result<(usize, Vec<DbEntry>)> {
    let bad = |detail: &str| Error::format(path, detail.to_string());
    if bytes.len() < 13 || &bytes[..4] != EVDB_MAGIC {
        return Err(bad("not an embedding database (bad magic)"));
    }
    if bytes[4] != EVDB_VERSION {
        return Err(bad(&format!("unsupported EVDB version {}", bytes[4])));
    }
    let k = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let count = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes")) as usize;
    let stride = 8 + 48 + 1 + 4 * k;
    if bytes.len() != 13 + count * stride {
        return Err(bad(&format!(
            "expected {} bytes for {count} entries of K={k}, found {}",
            13 + count * stride,
            bytes.len()
        )));
    }
    let mut entries = Vec::with_capacity(count);
    for rec in bytes[13..].chunks_exact(stride) {
        let sample_id = u64::from_le_bytes(rec[..8].try_into().expect("8 bytes"));
        let mut pose = [0.0; 6];
        for (i, p) in pose.iter_mut().enumerate() {
            *p = f64::from_le_bytes(rec[8 + 8 * i..16 + 8 * i].try_into().expect("8 bytes"));
        }
        let modality = Modality::from_u8(rec[56])
            .ok_or_else(|| bad(&format!("unknown modality tag {}", rec[56])))?;
        let ev = rec[57..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        entries.push(DbEntry {
            sample_id,
            pose: Pose::from_array(pose, 0),
            modality,
            ev,
        });
    }
    Ok((k, entries))
}

pub fn write_evdb(path: &Path, entries: &[DbEntry]) -> Result<()> {
    fs::write(path, encode_evdb(entries)?).map_err(|e| Error::io(path, e))
}

pub fn read_evdb(path: &Path) -> Result<Vec<DbEntry>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_evdb(&bytes, path)?.1)
}
