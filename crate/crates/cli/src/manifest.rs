//! Run manifests: what a command read, what it wrote, and content hashes of
//! both. Two runs whose `input_hash` agree must produce identical `outputs`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Hash over the resolved configuration, the arguments and every input file.
    pub input_hash: String,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub wall_time_s: f64,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of `blob <len>\0<bytes>`, the way git names file contents.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

pub fn file_hash(path: &Path) -> Result<FileHash> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(FileHash {
        path: path.to_path_buf(),
        sha256: blob_hash(&bytes),
    })
}

/// Hashes every regular file below `path`, sorted by path.
pub fn tree_hashes(path: &Path) -> Result<Vec<FileHash>> {
    let meta = fs::metadata(path).map_err(|e| CliError::io(path, e))?;
    if meta.is_file() {
        return Ok(vec![file_hash(path)?]);
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| CliError::io(path, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| CliError::io(path, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    let mut out = Vec::new();
    for p in entries {
        if p.file_name().is_some_and(|n| n == MANIFEST_NAME) {
            continue;
        }
        out.extend(tree_hashes(&p)?);
    }
    Ok(out)
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Collects the inputs of one command.
#[derive(Debug, Clone)]
pub struct ManifestBuilder {
    command: String,
    config_path: Option<PathBuf>,
    seed: Option<u64>,
    hasher: Sha256,
    inputs: Vec<FileHash>,
}

impl ManifestBuilder {
    /// `resolved_config` is the full configuration text after presets and
    /// overrides were applied.
    pub fn new(command: &str, config_path: Option<&Path>, resolved_config: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(format!("command {command}\n").as_bytes());
        hasher.update(blob_hash(resolved_config.as_bytes()).as_bytes());
        Self {
            command: command.into(),
            config_path: config_path.map(Path::to_path_buf),
            seed: None,
            hasher,
            inputs: Vec::new(),
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self.hasher.update(format!("seed {seed}\n").as_bytes());
        self
    }

    pub fn arg(mut self, name: &str, value: impl std::fmt::Display) -> Self {
        self.hasher.update(format!("arg {name}={value}\n").as_bytes());
        self
    }

    pub fn input(mut self, path: &Path) -> Result<Self> {
        for h in tree_hashes(path)? {
            self.hasher.update(format!("input {}\n", h.sha256).as_bytes());
            self.inputs.push(h);
        }
        Ok(self)
    }

    pub fn finish(self, outputs: &[PathBuf], wall_time_s: f64) -> Result<RunManifest> {
        let mut hashes = Vec::new();
        for p in outputs {
            hashes.extend(tree_hashes(p)?);
        }
        Ok(RunManifest {
            command: self.command,
            config_path: self.config_path,
            seed: self.seed,
            input_hash: hex(&self.hasher.finalize()),
            inputs: self.inputs,
            outputs: hashes,
            wall_time_s,
        })
    }
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// `out/manifest.json` for a directory, `out.manifest.json` for a file.
    pub fn path_for(out: &Path) -> PathBuf {
        if out.is_dir() {
            out.join(MANIFEST_NAME)
        } else {
            let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
            name.push(".manifest.json");
            out.with_file_name(name)
        }
    }

    pub fn write(&self, out: &Path) -> Result<PathBuf> {
        let path = Self::path_for(out);
        fs::write(&path, self.to_json() + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git_sha256_objects() {
        // `git hash-object --object-format=sha256` on an empty file.
        assert_eq!(
            blob_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }

    #[test]
    fn input_hash_depends_on_every_input() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.bin");
        fs::write(&f, b"one").unwrap();
        let base = || ManifestBuilder::new("synth", None, "x = 1").seed(7);
        let a = base().input(&f).unwrap().finish(&[], 0.0).unwrap();
        let b = base().input(&f).unwrap().finish(&[], 1.0).unwrap();
        assert_eq!(a.input_hash, b.input_hash);
        let c = ManifestBuilder::new("synth", None, "x = 2").seed(7).finish(&[], 0.0).unwrap();
        let d = base().arg("task", "bass").input(&f).unwrap().finish(&[], 0.0).unwrap();
        fs::write(&f, b"two").unwrap();
        let e = base().input(&f).unwrap().finish(&[], 0.0).unwrap();
        for other in [&c, &d, &e] {
            assert_ne!(a.input_hash, other.input_hash);
        }
    }

    #[test]
    fn manifest_sits_beside_files_and_inside_directories() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(RunManifest::path_for(dir.path()), dir.path().join("manifest.json"));
        let f = dir.path().join("data.stem");
        assert_eq!(RunManifest::path_for(&f), dir.path().join("data.stem.manifest.json"));
    }

    #[test]
    fn directory_hashes_skip_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("b"), b"b").unwrap();
        fs::write(dir.path().join("a"), b"a").unwrap();
        fs::write(dir.path().join(MANIFEST_NAME), b"{}").unwrap();
        let h = tree_hashes(dir.path()).unwrap();
        let names: Vec<_> = h.iter().map(|f| f.path.file_name().unwrap().to_owned()).collect();
        assert_eq!(names, ["a", "b"]);
    }
}
