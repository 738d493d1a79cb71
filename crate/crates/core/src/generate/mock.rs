//! Deterministic scripted generator for offline runs and tests.
//!
//! A script is a JSON Lines file; each record names one prompt matcher and
//! the completion to return:
//!
//! ```json
//! {"prompt": "Q?\nAnswer the question using a single word or phrase.", "text": "Paris", "logprobs": [-0.1]}
//! {"prompt_sha256": "9f86d0…", "text": "No", "token_logprobs": [{"token": "No", "logprob": -0.02}]}
//! {"prompt_contains": "Gustave Eiffel", "text": "1889", "logprobs": [-0.3]}
//! ```
//!
//! Lookup order is exact prompt, then hash, then the first `prompt_contains`
//! record (file order) whose needle occurs in the prompt.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{prompt_hash, FinishReason, GenerationRequest, GenerationResult, Generator, TokenLogprob};
use crate::error::{Error, Result};

/// A canned completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scripted {
    pub text: String,
    #[serde(default)]
    pub token_logprobs: Vec<TokenLogprob>,
    #[serde(default = "default_finish")]
    pub finish_reason: FinishReason,
}

fn default_finish() -> FinishReason {
    FinishReason::Stop
}

impl Scripted {
    /// Builds a completion from bare logprobs. Tokens are the text's
    /// whitespace-led words when the counts agree; otherwise the first token
    /// carries the whole text and the rest are empty.
    pub fn new(text: impl Into<String>, logprobs: &[f64]) -> Self {
        let text = text.into();
        let tokens = split_tokens(&text, logprobs.len());
        Self {
            token_logprobs: tokens
                .into_iter()
                .zip(logprobs)
                .map(|(token, &logprob)| TokenLogprob { token, logprob })
                .collect(),
            text,
            finish_reason: FinishReason::Stop,
        }
    }
}

fn split_tokens(text: &str, n: usize) -> Vec<String> {
    if n == 0 {
        return Vec::new();
    }
    let mut words: Vec<String> = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() && i > start && !text[start..i].trim().is_empty() {
            words.push(text[start..i].to_string());
            start = i;
        }
    }
    words.push(text[start..].to_string());
    if words.len() == n {
        return words;
    }
    let mut out = vec![String::new(); n];
    out[0] = text.to_string();
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Matcher {
    Exact(String),
    Sha256(String),
    Contains(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptEntry {
    pub matcher: Matcher,
    pub response: Scripted,
}

impl ScriptEntry {
    pub fn exact(prompt: impl Into<String>, response: Scripted) -> Self {
        Self {
            matcher: Matcher::Exact(prompt.into()),
            response,
        }
    }

    pub fn hashed(prompt_sha256: impl Into<String>, response: Scripted) -> Self {
        Self {
            matcher: Matcher::Sha256(prompt_sha256.into()),
            response,
        }
    }

    pub fn contains(needle: impl Into<String>, response: Scripted) -> Self {
        Self {
            matcher: Matcher::Contains(needle.into()),
            response,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ScriptLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prompt_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prompt_contains: Option<String>,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    token_logprobs: Option<Vec<TokenLogprob>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    logprobs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    finish_reason: Option<FinishReason>,
}

impl ScriptLine {
    fn into_entry(self) -> std::result::Result<ScriptEntry, String> {
        let matcher = match (self.prompt, self.prompt_sha256, self.prompt_contains) {
            (Some(p), None, None) => Matcher::Exact(p),
            (None, Some(h), None) => Matcher::Sha256(h.to_ascii_lowercase()),
            (None, None, Some(c)) => Matcher::Contains(c),
            _ => {
                return Err(
                    "exactly one of prompt, prompt_sha256, prompt_contains is required".into(),
                )
            }
        };
        let mut response = match (self.token_logprobs, self.logprobs) {
            (Some(t), None) => Scripted {
                text: self.text,
                token_logprobs: t,
                finish_reason: FinishReason::Stop,
            },
            (None, Some(lp)) => Scripted::new(self.text, &lp),
            (None, None) => Scripted::new(self.text, &[]),
            (Some(_), Some(_)) => return Err("give token_logprobs or logprobs, not both".into()),
        };
        if let Some(f) = self.finish_reason {
            response.finish_reason = f;
        }
        Ok(ScriptEntry { matcher, response })
    }

    fn from_entry(e: &ScriptEntry) -> Self {
        let (prompt, prompt_sha256, prompt_contains) = match &e.matcher {
            Matcher::Exact(p) => (Some(p.clone()), None, None),
            Matcher::Sha256(h) => (None, Some(h.clone()), None),
            Matcher::Contains(c) => (None, None, Some(c.clone())),
        };
        Self {
            prompt,
            prompt_sha256,
            prompt_contains,
            text: e.response.text.clone(),
            token_logprobs: Some(e.response.token_logprobs.clone()),
            logprobs: None,
            finish_reason: Some(e.response.finish_reason),
        }
    }
}

/// Serializes entries in the script file format.
pub fn script_to_jsonl(entries: &[ScriptEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(&ScriptLine::from_entry(e)).expect("serializable"));
        out.push('\n');
    }
    out
}

#[derive(Debug)]
pub struct MockGenerator {
    id: String,
    exact: HashMap<String, Scripted>,
    hashed: HashMap<String, Scripted>,
    contains: Vec<(String, Scripted)>,
    calls: AtomicU64,
}

impl MockGenerator {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        let fingerprint = prompt_hash(&script_to_jsonl(&entries));
        let mut exact = HashMap::new();
        let mut hashed = HashMap::new();
        let mut contains = Vec::new();
        // First record wins for duplicate matchers.
        for e in entries {
            match e.matcher {
                Matcher::Exact(p) => {
                    exact.entry(p).or_insert(e.response);
                }
                Matcher::Sha256(h) => {
                    hashed.entry(h).or_insert(e.response);
                }
                Matcher::Contains(c) => contains.push((c, e.response)),
            }
        }
        Self {
            id: format!("mock:{}", &fingerprint[..16]),
            exact,
            hashed,
            contains,
            calls: AtomicU64::new(0),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let rec: ScriptLine =
                serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
            entries.push(rec.into_entry().map_err(parse_err)?);
        }
        Ok(Self::new(entries))
    }

    /// Number of `complete` calls served, hits or misses.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    fn lookup(&self, prompt: &str) -> Option<&Scripted> {
        if let Some(s) = self.exact.get(prompt) {
            return Some(s);
        }
        if !self.hashed.is_empty() {
            if let Some(s) = self.hashed.get(&prompt_hash(prompt)) {
                return Some(s);
            }
        }
        self.contains
            .iter()
            .find(|(needle, _)| prompt.contains(needle.as_str()))
            .map(|(_, s)| s)
    }
}

impl Generator for MockGenerator {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let s = self.lookup(&request.prompt).ok_or_else(|| Error::ScriptedMiss {
            prompt_hash: prompt_hash(&request.prompt),
        })?;
        Ok(GenerationResult {
            text: s.text.clone(),
            token_logprobs: if request.want_logprobs {
                s.token_logprobs.clone()
            } else {
                Vec::new()
            },
            finish_reason: s.finish_reason,
        })
    }
}
