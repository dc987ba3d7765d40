//! Checkpoint directories: one HBT1 file per named tensor plus a JSON
//! manifest recording the model kind, config, seed, step and per-tensor
//! SHA-256.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use numcore::{hbt, NumError, ParamStore};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("no checkpoint at {0}")]
    Missing(PathBuf),
    #[error("checkpoint at {path} holds a {found} model, expected {expected}")]
    Kind {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error("tensor {name}: SHA-256 mismatch (manifest {expected}, file {actual})")]
    HashMismatch {
        name: String,
        expected: String,
        actual: String,
    },
    #[error("tensor {name}: {source}")]
    Tensor { name: String, source: NumError },
    #[error("tensor name {0:?} cannot be used as a file name")]
    BadName(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub kind: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_name(name: &str) -> Result<String, CheckpointError> {
    let ok = !name.is_empty()
        && !name.starts_with('.')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'));
    if ok {
        Ok(format!("{name}.hbt"))
    } else {
        Err(CheckpointError::BadName(name.to_string()))
    }
}

/// Writes every tensor of `store` and the manifest into `dir`.
pub fn save_checkpoint(
    dir: &Path,
    kind: &str,
    store: &ParamStore,
    config: serde_json::Value,
    seed: u64,
    step: u64,
) -> Result<CheckpointManifest, CheckpointError> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::with_capacity(store.len());
    for p in store.iter() {
        let file = file_name(&p.name)?;
        let bytes = hbt::to_bytes(&p.value);
        fs::write(dir.join(&file), &bytes)?;
        tensors.push(TensorEntry {
            name: p.name.clone(),
            file,
            shape: p.value.shape().to_vec(),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = CheckpointManifest {
        kind: kind.to_string(),
        config,
        seed,
        step,
        tensors,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Reads a checkpoint, verifying every tensor against its manifest hash.
pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore, CheckpointManifest), CheckpointError> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.is_file() {
        return Err(CheckpointError::Missing(dir.to_path_buf()));
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    let mut store = ParamStore::new();
    for e in &manifest.tensors {
        if file_name(&e.name)? != e.file {
            return Err(CheckpointError::BadName(e.file.clone()));
        }
        let bytes = fs::read(dir.join(&e.file))?;
        let actual = sha256_hex(&bytes);
        if actual != e.sha256 {
            return Err(CheckpointError::HashMismatch {
                name: e.name.clone(),
                expected: e.sha256.clone(),
                actual,
            });
        }
        let t = hbt::from_bytes(&bytes).map_err(|source| CheckpointError::Tensor {
            name: e.name.clone(),
            source,
        })?;
        if t.shape() != e.shape.as_slice() {
            return Err(CheckpointError::Tensor {
                name: e.name.clone(),
                source: NumError::Format(format!("shape {:?}, manifest says {:?}", t.shape(), e.shape)),
            });
        }
        store.insert(e.name.clone(), t).map_err(|source| CheckpointError::Tensor {
            name: e.name.clone(),
            source,
        })?;
    }
    Ok((store, manifest))
}

/// As [`load_checkpoint`], also requiring the manifest's `kind`.
pub fn load_kind(dir: &Path, kind: &str) -> Result<(ParamStore, CheckpointManifest), CheckpointError> {
    let (store, manifest) = load_checkpoint(dir)?;
    if manifest.kind != kind {
        return Err(CheckpointError::Kind {
            path: dir.to_path_buf(),
            found: manifest.kind,
            expected: kind.to_string(),
        });
    }
    Ok((store, manifest))
}
