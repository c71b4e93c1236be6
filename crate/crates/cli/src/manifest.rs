//! Run metadata written next to every command's outputs.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use s3_core::Error;

#[derive(Debug, Serialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Everything except `timestamps` is a pure function of the inputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seeds: Map<String, Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trainer: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache: Option<Value>,
    pub artifacts: Vec<Artifact>,
    pub timestamps: Map<String, Value>,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

pub struct Recorder {
    out_dir: PathBuf,
    manifest: RunManifest,
    files: Vec<PathBuf>,
}

impl Recorder {
    pub fn new(command: &str, config: Value, out_dir: &Path) -> Self {
        let mut timestamps = Map::new();
        timestamps.insert("started_unix_ms".into(), now_ms().to_string().into());
        Self {
            out_dir: out_dir.to_path_buf(),
            manifest: RunManifest {
                command: command.into(),
                config,
                seeds: Map::new(),
                backend: None,
                trainer: None,
                cache: None,
                artifacts: Vec::new(),
                timestamps,
            },
            files: Vec::new(),
        }
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    /// Resolves an output path against the output directory.
    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.manifest.seeds.insert(name.into(), value.into());
    }

    pub fn backend(&mut self, id: String) {
        self.manifest.backend = Some(id);
    }

    pub fn trainer(&mut self, name: String) {
        self.manifest.trainer = Some(name);
    }

    pub fn cache(&mut self, stats: Value) {
        self.manifest.cache = Some(stats);
    }

    pub fn timestamp(&mut self, key: &str, value: Value) {
        self.manifest.timestamps.insert(key.into(), value);
    }

    /// Writes `bytes` to `path` (relative to the output directory) and
    /// records it as an artifact.
    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<PathBuf, Error> {
        let full = self.path(path);
        if let Some(dir) = full.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(&full, bytes).map_err(|e| Error::io(&full, e))?;
        self.files.push(full.clone());
        Ok(full)
    }

    pub fn write_json(&mut self, path: &Path, value: &impl Serialize) -> Result<PathBuf, Error> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
        text.push('\n');
        self.write(path, text.as_bytes())
    }

    /// Digests every recorded file and writes `manifest.json`.
    pub fn finish(mut self) -> Result<PathBuf, Error> {
        let mut seen = std::collections::BTreeSet::new();
        for f in &self.files {
            if !seen.insert(f.clone()) {
                continue;
            }
            let bytes = std::fs::read(f).map_err(|e| Error::io(f, e))?;
            let rel = f.strip_prefix(&self.out_dir).unwrap_or(f);
            self.manifest.artifacts.push(Artifact {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: hex::encode(Sha256::digest(&bytes)),
                bytes: bytes.len() as u64,
            });
        }
        self.manifest.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        self.manifest.timestamps.insert("finished_unix_ms".into(), now_ms().to_string().into());
        let path = self.out_dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::Internal(e.to_string()))?;
        text.push('\n');
        std::fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
