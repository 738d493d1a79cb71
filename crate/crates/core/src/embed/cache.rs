//! Content-addressed, append-only embedding cache.
//!
//! On disk the cache is a sequence of records:
//!
//! ```text
//! u32 key_len | key bytes (hex sha256) | u32 dim | dim × f32 (little endian)
//! ```
//!
//! The in-memory map is rebuilt on open. A truncated trailing record (an
//! interrupted append) is ignored and overwritten by the next append.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::index::UnitVector;

/// `sha256(embedder_id ‖ 0x00 ‖ text)` as lowercase hex.
pub fn cache_key(embedder_id: &str, text: &str) -> String {
    let mut h = Sha256::new();
    h.update(embedder_id.as_bytes());
    h.update([0u8]);
    h.update(text.as_bytes());
    format!("{:x}", h.finalize())
}

#[derive(Debug)]
struct CacheFile {
    path: PathBuf,
    file: File,
}

#[derive(Debug, Default)]
pub struct EmbeddingCache {
    entries: RwLock<HashMap<String, UnitVector>>,
    file: Option<Mutex<CacheFile>>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a persistent cache file.
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        let (entries, valid_len) = parse_records(&bytes);
        if valid_len < bytes.len() {
            tracing::warn!(
                path = %path.display(),
                dropped = bytes.len() - valid_len,
                "ignoring truncated trailing cache record"
            );
            file.set_len(valid_len as u64)
                .map_err(|e| Error::io(path, e))?;
        }
        file.seek(SeekFrom::End(0)).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            entries: RwLock::new(entries),
            file: Some(Mutex::new(CacheFile {
                path: path.to_path_buf(),
                file,
            })),
        })
    }

    pub fn get(&self, key: &str) -> Option<UnitVector> {
        self.entries.read().expect("cache lock").get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stores `vector` under `key`. An existing entry wins, so a hit always
    /// returns the first vector stored for that key.
    pub fn insert(&self, key: String, vector: UnitVector) -> Result<()> {
        let mut entries = self.entries.write().expect("cache lock");
        if entries.contains_key(&key) {
            return Ok(());
        }
        if let Some(file) = &self.file {
            let mut f = file.lock().expect("cache file lock");
            let rec = encode_record(&key, vector.values());
            let CacheFile { path, file } = &mut *f;
            file.write_all(&rec).map_err(|e| Error::io(path.as_path(), e))?;
            file.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        entries.insert(key, vector);
        Ok(())
    }
}

fn encode_record(key: &str, values: &[f32]) -> Vec<u8> {
    let mut rec = Vec::with_capacity(8 + key.len() + values.len() * 4);
    rec.extend_from_slice(&(key.len() as u32).to_le_bytes());
    rec.extend_from_slice(key.as_bytes());
    rec.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        rec.extend_from_slice(&v.to_le_bytes());
    }
    rec
}

fn parse_records(bytes: &[u8]) -> (HashMap<String, UnitVector>, usize) {
    let mut entries = HashMap::new();
    let mut pos = 0usize;
    let take_u32 = |pos: usize| -> Option<u32> {
        bytes
            .get(pos..pos + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    loop {
        let start = pos;
        let Some(klen) = take_u32(pos) else { return (entries, start) };
        pos += 4;
        let Some(kb) = bytes.get(pos..pos + klen as usize) else { return (entries, start) };
        let Ok(key) = std::str::from_utf8(kb) else { return (entries, start) };
        pos += klen as usize;
        let Some(dim) = take_u32(pos) else { return (entries, start) };
        pos += 4;
        let Some(vb) = bytes.get(pos..pos + dim as usize * 4) else { return (entries, start) };
        pos += dim as usize * 4;
        let values: Vec<f32> = vb
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let Ok(v) = UnitVector::from_normalized(values) else { return (entries, start) };
        entries.entry(key.to_string()).or_insert(v);
    }
}

pub type SharedCache = Arc<EmbeddingCache>;
