use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{format_err, IoContext, Result};
use crate::util::{sha256_file, sha256_hex, write_atomic};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of a run directory: the config hash, completed stages with their
/// output hashes, and a hash for every file in the directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    /// Stage key → relative path → SHA-256.
    pub stages: BTreeMap<String, BTreeMap<String, String>>,
    pub artifacts: BTreeMap<String, String>,
}

fn rel(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

impl Manifest {
    pub fn load(root: &Path) -> Result<Option<Self>> {
        let path = root.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).at(&path)?;
        serde_json::from_str(&text).map(Some).map_err(|e| format_err(&path, e))
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(&root.join(MANIFEST_FILE), json.as_bytes())
    }

    /// True when the stage was recorded and all its files still hash the same.
    pub fn stage_complete(&self, root: &Path, key: &str) -> bool {
        let Some(files) = self.stages.get(key) else {
            return false;
        };
        files
            .iter()
            .all(|(p, h)| sha256_file(&root.join(p)).is_ok_and(|actual| &actual == h))
    }

    pub fn record_stage(&mut self, root: &Path, key: &str, files: &[PathBuf]) -> Result<()> {
        let mut hashes = BTreeMap::new();
        for f in files {
            hashes.insert(rel(root, f), sha256_file(f)?);
        }
        self.stages.insert(key.to_string(), hashes);
        Ok(())
    }

    /// Records a single command run into `root`: its invocation is written to
    /// `commands/<name>.json` and becomes the config hash, and its outputs
    /// form the stage `name`.
    pub fn record_command(root: &Path, name: &str, invocation: &serde_json::Value, seeds: &[u64], outputs: &[PathBuf]) -> Result<Self> {
        let text = serde_json::to_string_pretty(invocation).expect("invocation serializes");
        let copy = root.join("commands").join(format!("{name}.json"));
        write_atomic(&copy, text.as_bytes())?;
        let mut m = Self::load(root)?.unwrap_or_default();
        m.config_sha256 = sha256_hex(text.as_bytes());
        m.seeds = seeds.to_vec();
        let mut files = outputs.to_vec();
        files.push(copy);
        m.record_stage(root, name, &files)?;
        m.refresh_artifacts(root)?;
        m.save(root)?;
        Ok(m)
    }

    /// Re-hashes every file under `root` except the manifest itself.
    pub fn refresh_artifacts(&mut self, root: &Path) -> Result<()> {
        let mut out = BTreeMap::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir).at(&dir)? {
                let path = entry.at(&dir)?.path();
                if path.is_dir() {
                    stack.push(path);
                } else if path != root.join(MANIFEST_FILE) {
                    out.insert(rel(root, &path), sha256_file(&path)?);
                }
            }
        }
        self.artifacts = out;
        Ok(())
    }
}
