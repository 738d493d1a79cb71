//! Access to the answer / pseudo-context generator.
//!
//! [`Gateway`] wraps any [`Generator`] backend with request validation,
//! logprob sanity checks and a result cache keyed by backend id, prompt,
//! `max_tokens` and temperature.

mod mock;
mod openai;
mod prompt;

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use mock::{script_to_jsonl, Matcher, MockGenerator, ScriptEntry, Scripted};
pub use openai::{HttpGenerator, WireApi};
pub use prompt::{render_prompt, PromptTemplate, TemplateKind};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub want_logprobs: bool,
}

impl GenerationRequest {
    /// Greedy decoding (temperature 0.0) with logprobs requested.
    pub fn new(prompt: impl Into<String>, max_tokens: u32) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens,
            temperature: 0.0,
            want_logprobs: true,
        }
    }

    pub fn without_logprobs(mut self) -> Self {
        self.want_logprobs = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(Error::Contract("prompt is empty".into()));
        }
        if self.max_tokens == 0 {
            return Err(Error::Contract("max_tokens must be positive".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::Contract(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub token_logprobs: Vec<TokenLogprob>,
    pub finish_reason: FinishReason,
}

impl GenerationResult {
    pub fn logprobs(&self) -> impl Iterator<Item = f64> + '_ {
        self.token_logprobs.iter().map(|t| t.logprob)
    }

    fn check_logprobs(&self) -> Result<()> {
        for t in &self.token_logprobs {
            if t.logprob.is_nan() || t.logprob > 0.0 {
                return Err(Error::Generation(format!(
                    "backend returned logprob {} for token {:?}",
                    t.logprob, t.token
                )));
            }
        }
        Ok(())
    }
}

/// A completion backend.
pub trait Generator: Send + Sync {
    /// Stable identity; part of every cache key.
    fn id(&self) -> &str;

    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult>;
}

/// `sha256` of `prompt`, lowercase hex.
pub fn prompt_hash(prompt: &str) -> String {
    format!("{:x}", Sha256::digest(prompt.as_bytes()))
}

fn request_key(backend_id: &str, req: &GenerationRequest) -> String {
    let mut h = Sha256::new();
    h.update(backend_id.as_bytes());
    h.update([0u8]);
    h.update(req.prompt.as_bytes());
    h.update([0u8]);
    h.update(req.max_tokens.to_le_bytes());
    h.update(req.temperature.to_bits().to_le_bytes());
    format!("{:x}", h.finalize())
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    result: GenerationResult,
}

/// Generation results keyed by request. Optionally persisted as JSON Lines.
#[derive(Debug, Default)]
pub struct GenerationCache {
    entries: RwLock<HashMap<String, GenerationResult>>,
    file: Option<Mutex<(PathBuf, File)>>,
}

impl GenerationCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| Error::io(path, e))?;
                // A torn final line from an interrupted append is skipped.
                if let Ok(rec) = serde_json::from_str::<CacheLine>(&line) {
                    entries.entry(rec.key).or_insert(rec.result);
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            entries: RwLock::new(entries),
            file: Some(Mutex::new((path.to_path_buf(), file))),
        })
    }

    fn get(&self, key: &str) -> Option<GenerationResult> {
        self.entries.read().expect("cache lock").get(key).cloned()
    }

    fn insert(&self, key: String, result: GenerationResult) -> Result<()> {
        let mut entries = self.entries.write().expect("cache lock");
        if let Some(file) = &self.file {
            let mut guard = file.lock().expect("cache file lock");
            let (path, f) = &mut *guard;
            let mut line = serde_json::to_string(&CacheLine {
                key: key.clone(),
                result: result.clone(),
            })
            .map_err(|e| Error::Contract(e.to_string()))?;
            line.push('\n');
            f.write_all(line.as_bytes())
                .map_err(|e| Error::io(path.as_path(), e))?;
        }
        entries.insert(key, result);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A backend plus its cache.
pub struct Gateway {
    backend: Box<dyn Generator>,
    cache: GenerationCache,
    backend_calls: AtomicU64,
}

impl Gateway {
    pub fn new(backend: Box<dyn Generator>, cache: GenerationCache) -> Self {
        Self {
            backend,
            cache,
            backend_calls: AtomicU64::new(0),
        }
    }

    pub fn uncached(backend: Box<dyn Generator>) -> Self {
        Self::new(backend, GenerationCache::in_memory())
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    /// Number of requests that reached the backend (cache misses).
    pub fn backend_calls(&self) -> u64 {
        self.backend_calls.load(Ordering::Relaxed)
    }

    pub fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult> {
        request.validate()?;
        let key = request_key(self.backend.id(), request);
        if let Some(hit) = self.cache.get(&key) {
            // A result cached without logprobs cannot answer a request for them.
            let usable = !request.want_logprobs
                || !hit.token_logprobs.is_empty()
                || hit.text.is_empty();
            if usable {
                return Ok(hit);
            }
        }
        self.backend_calls.fetch_add(1, Ordering::Relaxed);
        let result = self.backend.complete(request)?;
        result.check_logprobs()?;
        self.cache.insert(key, result.clone())?;
        Ok(result)
    }
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.id())
            .field("cached", &self.cache.len())
            .finish()
    }
}
