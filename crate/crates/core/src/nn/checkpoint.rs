//! Checkpoint file pair: `<name>.manifest.json` and `<name>.params.bin`.
//!
//! The blob holds every value as a little-endian `f64`, in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

use super::params::{ParamEntry, ParamStore};
use super::NnError;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: u32,
    pub value_count: usize,
    pub entries: Vec<ParamEntry>,
}

pub fn checkpoint_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{name}.manifest.json")),
        dir.join(format!("{name}.params.bin")),
    )
}

pub fn save_checkpoint<T: Scalar>(
    store: &ParamStore<T>,
    dir: &Path,
    name: &str,
) -> Result<(), NnError> {
    let (manifest_path, blob_path) = checkpoint_paths(dir, name);
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        value_count: store.len(),
        entries: store.manifest().to_vec(),
    };
    let json =
        serde_json::to_string_pretty(&manifest).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let blob: Vec<u8> = store
        .values()
        .iter()
        .flat_map(|v| v.as_f64().to_le_bytes())
        .collect();
    fs::write(&manifest_path, json + "\n").map_err(|e| io_err(&manifest_path, e))?;
    fs::write(&blob_path, blob).map_err(|e| io_err(&blob_path, e))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(dir: &Path, name: &str) -> Result<ParamStore<T>, NnError> {
    let (manifest_path, blob_path) = checkpoint_paths(dir, name);
    let text = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)
        .map_err(|e| NnError::Checkpoint(format!("{}: {e}", manifest_path.display())))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    let blob = fs::read(&blob_path).map_err(|e| io_err(&blob_path, e))?;
    if blob.len() != manifest.value_count * 8 {
        return Err(NnError::Checkpoint(format!(
            "{} holds {} bytes, manifest expects {} values",
            blob_path.display(),
            blob.len(),
            manifest.value_count
        )));
    }
    let values = blob
        .chunks_exact(8)
        .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("chunk of 8"))))
        .collect();
    ParamStore::from_parts(manifest.entries, values)
}

fn io_err(path: &Path, e: std::io::Error) -> NnError {
    NnError::Checkpoint(format!("{}: {e}", path.display()))
}
