//! Tensor archives.
//!
//! An archive is a directory holding `manifest.json` and one `.bin` file per
//! tensor. Each binary file is the row-major tensor as little-endian
//! IEEE-754 `f32`. The manifest lists names, shapes, files and SHA-256
//! digests in a fixed order, so equal contents give byte-identical archives.
//! Archives are written to a sibling temporary directory and renamed into
//! place.

use std::fs;
use std::path::{Path, PathBuf};

use pcrl_core::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "pcrl-tensor-archive";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub byte_order: String,
    pub tensors: Vec<Entry>,
    pub metadata: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

/// An archive loaded into memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub metadata: Value,
}

impl Archive {
    pub fn new(metadata: Value) -> Self {
        Self {
            tensors: Vec::new(),
            metadata,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose names start with `prefix`, prefix stripped.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor<f32>)> + 'a {
        self.tensors
            .iter()
            .filter_map(move |(n, t)| n.strip_prefix(prefix).map(|s| (s, t)))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_atomic(dir, |tmp| {
            let mut entries = Vec::with_capacity(self.tensors.len());
            for (i, (name, t)) in self.tensors.iter().enumerate() {
                let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                let file = format!("{i:04}.bin");
                fs::write(tmp.join(&file), &bytes).at(tmp.join(&file))?;
                entries.push(Entry {
                    name: name.clone(),
                    file,
                    shape: t.shape().to_vec(),
                    sha256: hex::encode(Sha256::digest(&bytes)),
                });
            }
            let manifest = Manifest {
                format: FORMAT.into(),
                version: 1,
                dtype: "f32".into(),
                byte_order: "little".into(),
                tensors: entries,
                metadata: self.metadata.clone(),
            };
            let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
            text.push('\n');
            fs::write(tmp.join(MANIFEST), text).at(tmp.join(MANIFEST))
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let corrupt = |reason: String| Error::CorruptArchive {
            path: dir.to_path_buf(),
            reason,
        };
        if manifest.format != FORMAT || manifest.dtype != "f32" || manifest.byte_order != "little" {
            return Err(corrupt(format!(
                "unsupported format {} / {} / {}",
                manifest.format, manifest.dtype, manifest.byte_order
            )));
        }
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            if e.file.contains(['/', '\\']) || e.file.starts_with('.') {
                return Err(corrupt(format!("bad tensor file name {:?}", e.file)));
            }
            let path = dir.join(&e.file);
            let bytes = fs::read(&path).at(&path)?;
            let numel: usize = e.shape.iter().product();
            if bytes.len() != numel * 4 {
                return Err(corrupt(format!(
                    "{} holds {} bytes, shape {:?} needs {}",
                    e.file,
                    bytes.len(),
                    e.shape,
                    numel * 4
                )));
            }
            if hex::encode(Sha256::digest(&bytes)) != e.sha256 {
                return Err(Error::DigestMismatch {
                    path,
                    name: e.name.clone(),
                });
            }
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((e.name.clone(), Tensor::from_vec(&e.shape, data).map_err(|e| corrupt(e.to_string()))?));
        }
        Ok(Self {
            tensors,
            metadata: manifest.metadata,
        })
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).at(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::CorruptArchive {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })
}

/// SHA-256 of the manifest file, which pins every tensor through its digest.
pub fn manifest_digest(dir: &Path) -> Result<String> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).at(&path)?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn sibling(dir: &Path, tag: &str) -> PathBuf {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    dir.with_file_name(format!(".{name}.{tag}-{}", std::process::id()))
}

/// Fills a fresh temporary directory with `fill`, then moves it to `dir`,
/// replacing whatever was there.
pub fn write_atomic(dir: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).at(parent)?;
    }
    let tmp = sibling(dir, "tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).at(&tmp)?;
    }
    fs::create_dir(&tmp).at(&tmp)?;
    if let Err(e) = fill(&tmp) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    let old = sibling(dir, "old");
    if dir.exists() {
        fs::rename(dir, &old).at(dir)?;
    }
    fs::rename(&tmp, dir).at(dir)?;
    if old.exists() {
        fs::remove_dir_all(&old).at(&old)?;
    }
    Ok(())
}

/// Writes `contents` to `path` through a temporary file and a rename.
pub fn write_file_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).at(parent)?;
    }
    let tmp = sibling(path, "tmp");
    fs::write(&tmp, contents).at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}
