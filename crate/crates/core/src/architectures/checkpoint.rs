use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchError, ParamStore};
use crate::numerics::{DType, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// `manifest.json` of a checkpoint directory. `params.bin` holds every
/// parameter as little-endian `f32`, concatenated in manifest order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub dtype: DType,
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ArchError + '_ {
    move |source| ArchError::Io { path: path.to_path_buf(), source }
}

pub fn save_checkpoint<C: Serialize>(dir: &Path, config: &C, params: &ParamStore) -> Result<(), ArchError> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let manifest = Manifest {
        version: FORMAT_VERSION,
        dtype: DType::F32,
        config: serde_json::to_value(config).map_err(|e| ArchError::Checkpoint(e.to_string()))?,
        params: params.iter().map(|(n, t)| ParamEntry { name: n.to_string(), shape: t.shape().to_vec() }).collect(),
    };
    let mut blob = Vec::with_capacity(params.numel() * 4);
    for (_, t) in params.iter() {
        blob.extend(t.to_le_bytes());
    }
    let mpath = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&mpath, json).map_err(io(&mpath))?;
    let ppath = dir.join(PARAMS_FILE);
    std::fs::write(&ppath, blob).map_err(io(&ppath))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, ArchError> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mpath).map_err(io(&mpath))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| ArchError::Checkpoint(format!("{}: {e}", mpath.display())))?;
    if manifest.version != FORMAT_VERSION {
        return Err(ArchError::Checkpoint(format!("unsupported checkpoint version {}", manifest.version)));
    }
    if manifest.dtype != DType::F32 {
        return Err(ArchError::Checkpoint(format!("unsupported checkpoint dtype {}", manifest.dtype)));
    }
    Ok(manifest)
}

/// Reads a checkpoint; returns its manifest and parameters.
pub fn load_checkpoint(dir: &Path) -> Result<(Manifest, ParamStore), ArchError> {
    let manifest = read_manifest(dir)?;
    let ppath = dir.join(PARAMS_FILE);
    let blob = std::fs::read(&ppath).map_err(io(&ppath))?;
    let expected: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>() * 4).sum();
    if blob.len() != expected {
        return Err(ArchError::Checkpoint(format!(
            "{} has {} bytes, manifest describes {expected}",
            ppath.display(),
            blob.len()
        )));
    }
    let mut store = ParamStore::new();
    let mut at = 0;
    for p in &manifest.params {
        let n: usize = p.shape.iter().product();
        let data = blob[at..at + 4 * n].chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        at += 4 * n;
        let t = Tensor::new(p.shape.clone(), data).expect("length checked above");
        if store.insert(p.name.clone(), t).is_some() {
            return Err(ArchError::Checkpoint(format!("duplicate parameter `{}`", p.name)));
        }
    }
    Ok((manifest, store))
}
