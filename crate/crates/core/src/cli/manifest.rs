use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numcore::RNG_ALGORITHM;

use super::CliError;

pub const RUN_MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Provenance of one command's output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub config_sha256: Option<String>,
    /// Hash of the input (or generated) dataset's `dataset.json`.
    pub dataset_sha256: Option<String>,
    pub seeds: Vec<u64>,
    pub tool_version: String,
    pub rng_algorithm: String,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    /// SHA-256 of every other file in the directory, by relative path.
    pub files: BTreeMap<String, String>,
    /// Command-specific summary.
    #[serde(default)]
    pub details: serde_json::Value,
}

impl RunManifest {
    pub fn start(command: &str, args: &[String]) -> Self {
        let now = Utc::now();
        Self {
            command: command.to_string(),
            args: args.to_vec(),
            config_path: None,
            config_sha256: None,
            dataset_sha256: None,
            seeds: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            rng_algorithm: RNG_ALGORITHM.to_string(),
            started_at: now,
            finished_at: now,
            files: BTreeMap::new(),
            details: serde_json::Value::Null,
        }
    }

    /// Hashes the directory contents and writes `manifest.json` into it.
    pub fn finish(mut self, dir: &Path) -> Result<Self, CliError> {
        self.files = hash_tree(dir)?;
        self.finished_at = Utc::now();
        let mut text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        text.push('\n');
        let path = dir.join(RUN_MANIFEST);
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(self)
    }
}

fn hash_tree(dir: &Path) -> Result<BTreeMap<String, String>, CliError> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<(), CliError> {
        let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| CliError::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("walk stays under root");
                if rel != Path::new(RUN_MANIFEST) {
                    let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                    out.insert(key, sha256_file(&path)?);
                }
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

/// Loads `dir/manifest.json` and checks every recorded file hash.
pub fn verify_manifest(dir: &Path) -> Result<RunManifest, CliError> {
    let path = dir.join(RUN_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let manifest: RunManifest =
        serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let actual = hash_tree(dir)?;
    if actual != manifest.files {
        return Err(CliError::Incompatible(format!(
            "{}: recorded file hashes do not match the directory contents",
            path.display()
        )));
    }
    Ok(manifest)
}
