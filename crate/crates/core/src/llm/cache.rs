//! Persistent response cache.
//!
//! The file is append-only JSON lines of `{key, request_digest, completions}`.
//! A line that fails to parse is skipped (and counted); it never poisons the
//! rest of the file. The key covers the prompt, the sampling parameters, the
//! sample index and the wrapped backend's id; `n` is not part of it, so an
//! entry holding fewer completions than requested counts as a miss and is
//! superseded by a later line.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, GenerationRequest, LlmError};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub loaded: u64,
    pub corrupt: u64,
    pub hits: u64,
    pub misses: u64,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    key: String,
    request_digest: String,
    completions: Vec<String>,
}

type Slot = Arc<Mutex<Option<Vec<String>>>>;

pub struct CachedBackend<B> {
    inner: B,
    path: PathBuf,
    slots: Mutex<HashMap<String, Slot>>,
    file: Mutex<File>,
    loaded: u64,
    corrupt: u64,
    hits: AtomicU64,
    misses: AtomicU64,
}

fn digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// Cache key for `req` sent to a backend with identity `backend_id`.
pub fn cache_key(req: &GenerationRequest, backend_id: &str) -> String {
    digest(&[
        req.prompt.as_bytes(),
        &req.temperature.to_le_bytes(),
        &req.top_p.to_le_bytes(),
        &req.max_tokens.to_le_bytes(),
        &req.sample_index.to_le_bytes(),
        backend_id.as_bytes(),
    ])
}

impl<B: Backend> CachedBackend<B> {
    pub fn open(inner: B, path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let path = path.as_ref().to_path_buf();
        let mut slots: HashMap<String, Slot> = HashMap::new();
        let (mut loaded, mut corrupt) = (0, 0);
        if path.exists() {
            let f = File::open(&path).map_err(|e| LlmError::Cache(format!("{}: {e}", path.display())))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| LlmError::Cache(format!("{}: {e}", path.display())))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<Entry>(&line) {
                    Ok(e) => {
                        loaded += 1;
                        let better = match slots.get(&e.key) {
                            Some(s) => s.lock().unwrap().as_ref().is_none_or(|c| c.len() <= e.completions.len()),
                            None => true,
                        };
                        if better {
                            slots.insert(e.key, Arc::new(Mutex::new(Some(e.completions))));
                        }
                    }
                    Err(_) => corrupt += 1,
                }
            }
            if corrupt > 0 {
                log::warn!("{}: skipped {corrupt} unreadable cache record(s)", path.display());
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| LlmError::Cache(format!("{}: {e}", path.display())))?;
        Ok(Self {
            inner,
            path,
            slots: Mutex::new(slots),
            file: Mutex::new(file),
            loaded,
            corrupt,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            loaded: self.loaded,
            corrupt: self.corrupt,
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
        }
    }
}

impl<B: Backend> Backend for CachedBackend<B> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn generate(&self, req: &GenerationRequest) -> Result<Vec<String>, LlmError> {
        req.validate()?;
        let key = cache_key(req, &self.inner.id());
        let slot = self.slots.lock().unwrap().entry(key.clone()).or_default().clone();
        // Holding the per-key lock across the backend call keeps concurrent
        // identical requests from both reaching the backend.
        let mut slot = slot.lock().unwrap();
        let n = req.n as usize;
        if let Some(c) = slot.as_ref().filter(|c| c.len() >= n) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(c[..n].to_vec());
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let out = self.inner.generate(req)?;
        let entry = Entry {
            key,
            request_digest: digest(&[&serde_json::to_vec(req).unwrap_or_default()]),
            completions: out.clone(),
        };
        let mut line = serde_json::to_string(&entry).map_err(|e| LlmError::Cache(e.to_string()))?;
        line.push('\n');
        {
            let mut f = self.file.lock().unwrap();
            f.write_all(line.as_bytes())
                .and_then(|_| f.flush())
                .map_err(|e| LlmError::Cache(format!("{}: {e}", self.path.display())))?;
        }
        *slot = Some(out.clone());
        Ok(out)
    }
}
