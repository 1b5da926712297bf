//! Checkpoint files: a JSON manifest next to a blob of little-endian `f32`
//! values, concatenated in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::sha256_hex;
use crate::error::{Error, Result};
use crate::params::{Architecture, ModelParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: RunConfig,
    /// File name of the blob, relative to the manifest.
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
    /// SHA-256 of the blob.
    pub checksum: String,
}

/// Blob path paired with a manifest path: same stem, `.bin` extension.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn encode_blob(params: &ModelParams<f32>) -> (Vec<u8>, Vec<TensorEntry>) {
    let mut blob = Vec::with_capacity(params.scalar_count() * 4);
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        let offset = blob.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            length: blob.len() - offset,
        });
    }
    (blob, entries)
}

/// Writes `<stem>.json` and `<stem>.bin`.
pub fn save(path: &Path, config: &RunConfig, params: &ModelParams<f32>) -> Result<CheckpointManifest> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let (blob, tensors) = encode_blob(params);
    let blob_file = blob_path(path);
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: config.clone(),
        blob: blob_file
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        tensors,
        checksum: sha256_hex(&blob),
    };
    fs::write(&blob_file, &blob).map_err(|e| Error::io(format!("writing {}", blob_file.display()), e))?;
    let mut text =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("serializing checkpoint manifest", e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ModelParams<f32>,
}

impl Checkpoint {
    pub fn config(&self) -> &RunConfig {
        &self.manifest.config
    }

    /// Checks every tensor against the architecture implied by `arch`.
    pub fn check_against(&self, arch: &Architecture) -> Result<()> {
        self.params.validate(arch)
    }
}

/// Reads a checkpoint, verifying the blob checksum and tensor layout.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::json(format!("parsing {}", path.display()), e))?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    let blob_file = path.with_file_name(&manifest.blob);
    let blob = fs::read(&blob_file).map_err(|e| Error::io(format!("reading {}", blob_file.display()), e))?;
    let found = sha256_hex(&blob);
    if found != manifest.checksum {
        return Err(Error::Checksum {
            what: blob_file.display().to_string(),
            expected: manifest.checksum.clone(),
            found,
        });
    }
    let mut entries = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let count: usize = e.shape.iter().product();
        if e.dtype != "f32" || e.length != count * 4 || e.offset + e.length > blob.len() {
            return Err(Error::Config(format!("tensor {} has an inconsistent directory entry", e.name)));
        }
        let data = blob[e.offset..e.offset + e.length]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        entries.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    let params = ModelParams::from_entries(entries);
    params.validate(&manifest.config.architecture()?)?;
    Ok(Checkpoint { manifest, params })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let config = RunConfig::tiny();
        let params = ModelParams::<f32>::init(&config.architecture().unwrap(), 3);
        let first = dir.path().join("a.json");
        save(&first, &config, &params).unwrap();
        let loaded = load(&first).unwrap();
        assert_eq!(loaded.params, params);
        let second = dir.path().join("b.json");
        save(&second, &config, &loaded.params).unwrap();
        assert_eq!(fs::read(blob_path(&first)).unwrap(), fs::read(blob_path(&second)).unwrap());
    }

    #[test]
    fn corrupted_blob_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let config = RunConfig::tiny();
        let params = ModelParams::<f32>::init(&config.architecture().unwrap(), 3);
        let path = dir.path().join("c.json");
        save(&path, &config, &params).unwrap();
        let mut blob = fs::read(blob_path(&path)).unwrap();
        blob[5] ^= 0xff;
        fs::write(blob_path(&path), blob).unwrap();
        assert!(matches!(load(&path), Err(Error::Checksum { .. })));
    }

    #[test]
    fn dimension_mismatch_names_tensor() {
        let config = RunConfig::tiny();
        let params = ModelParams::<f32>::init(&config.architecture().unwrap(), 3);
        let ckpt = Checkpoint {
            manifest: CheckpointManifest {
                format_version: 1,
                config: config.clone(),
                blob: String::new(),
                tensors: vec![],
                checksum: String::new(),
            },
            params,
        };
        let other = config.with_dims(crate::params::Dims {
            d_v: 13,
            ..crate::params::Dims::tiny()
        });
        let err = ckpt.check_against(&other.architecture().unwrap()).unwrap_err();
        assert!(err.to_string().contains("proj.W_proj"), "{err}");
    }
}
