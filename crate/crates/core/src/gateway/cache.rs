//! Append-only, content-addressed completion cache.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::read_jsonl;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub prompt: String,
    pub completion: String,
    pub backend: String,
    pub timestamp: u64,
}

/// `sha256(backend tag ∥ 0x1f ∥ prompt)`, hex encoded.
pub fn cache_key(backend: &str, prompt: &str) -> String {
    let mut h = Sha256::new();
    h.update(backend.as_bytes());
    h.update([0x1f]);
    h.update(prompt.as_bytes());
    hex::encode(h.finalize())
}

/// Entries are bucketed by key; lookups compare the full prompt and backend
/// tag so a hash collision can never return the wrong completion.
#[derive(Debug, Default)]
pub struct ResponseCache {
    entries: RwLock<HashMap<String, Vec<CacheEntry>>>,
    writer: Mutex<Option<(PathBuf, BufWriter<File>)>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache::default()
    }

    /// Loads `path` if present and appends new entries to it.
    pub fn open(path: &Path) -> Result<Self> {
        let cache = ResponseCache::default();
        if path.exists() {
            let entries: Vec<CacheEntry> = read_jsonl(path)?;
            let mut map = cache.entries.write().unwrap();
            for e in entries {
                map.entry(e.key.clone()).or_default().push(e);
            }
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        *cache.writer.lock().unwrap() = Some((path.to_path_buf(), BufWriter::new(file)));
        Ok(cache)
    }

    pub fn get(&self, backend: &str, prompt: &str) -> Option<String> {
        let key = cache_key(backend, prompt);
        let map = self.entries.read().unwrap();
        map.get(&key)?
            .iter()
            .find(|e| e.prompt == prompt && e.backend == backend)
            .map(|e| e.completion.clone())
    }

    pub fn put(&self, backend: &str, prompt: &str, completion: &str) -> Result<()> {
        let entry = CacheEntry {
            key: cache_key(backend, prompt),
            prompt: prompt.to_string(),
            completion: completion.to_string(),
            backend: backend.to_string(),
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        };
        // single writer: the file lock also orders the in-memory insert
        let mut writer = self.writer.lock().unwrap();
        if let Some((path, w)) = writer.as_mut() {
            let line = serde_json::to_string(&entry).map_err(|e| Error::json("cache entry", e))?;
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(path.clone(), e))?;
        }
        let mut map = self.entries.write().unwrap();
        let bucket = map.entry(entry.key.clone()).or_default();
        if !bucket.iter().any(|e| e.prompt == entry.prompt && e.backend == entry.backend) {
            bucket.push(entry);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Test hook: inserts an entry under an arbitrary key.
    #[cfg(test)]
    fn insert_raw(&self, entry: CacheEntry) {
        self.entries.write().unwrap().entry(entry.key.clone()).or_default().push(entry);
    }
}
