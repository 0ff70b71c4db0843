//! Versioned binary checkpoints of a [`TrainState`].
//!
//! Layout: 8 magic bytes, a little-endian `u32` format version, then the
//! bincode-encoded state.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::TrainState;

pub const MAGIC: &[u8; 8] = b"STVADCKP";
pub const FORMAT_VERSION: u32 = 1;

pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bincode::serialize_into(&mut out, state).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let state: TrainState = bincode::deserialize(&bytes[12..]).map_err(|e| Error::Checkpoint(e.to_string()))?;
    state.model.config.validate()?;
    Ok(state)
}

/// Writes atomically through a temporary sibling file.
pub fn save(path: &Path, state: &TrainState) -> Result<()> {
    let bytes = to_bytes(state)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
