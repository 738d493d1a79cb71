use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Embedder;
use crate::error::{Error, Result};
use crate::http::HttpClient;

/// Signed feature hashing over lowercase alphanumeric tokens. Needs no
/// model and no network; similar wording gives similar vectors.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
    id: String,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "hashing embedder needs a positive dimension");
        Self {
            dim,
            id: format!("hashing-{dim}"),
        }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0.0f32; self.dim];
        let mut any = false;
        for token in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            let h = fnv1a(token.to_lowercase().as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign;
            any = true;
        }
        // Token-free text still needs a unit vector; all such texts coincide.
        if !any || v.iter().all(|&x| x == 0.0) {
            v[0] = 1.0;
        }
        v
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl Embedder for HashingEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// One line of a scripted-embedding file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptedVector {
    pub text: String,
    pub vector: Vec<f32>,
}

/// Exact text → vector table, for tests with hand-built geometry.
#[derive(Debug, Clone)]
pub struct ScriptedEmbedder {
    id: String,
    table: HashMap<String, Vec<f32>>,
}

impl ScriptedEmbedder {
    pub fn new(id: impl Into<String>, entries: impl IntoIterator<Item = (String, Vec<f32>)>) -> Self {
        Self {
            id: id.into(),
            table: entries.into_iter().collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ScriptedVector = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            table.insert(rec.text, rec.vector);
        }
        let id = format!("scripted:{}", &super::cache_key("scripted", &text)[..16]);
        Ok(Self { id, table })
    }
}

impl Embedder for ScriptedEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        texts
            .iter()
            .map(|t| {
                self.table.get(t).cloned().ok_or_else(|| {
                    Error::Contract(format!("no scripted vector for text {:?}", preview(t)))
                })
            })
            .collect()
    }
}

fn preview(t: &str) -> String {
    t.chars().take(60).collect()
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f32>,
    #[serde(default)]
    index: Option<usize>,
}

/// OpenAI-compatible `/embeddings` client.
#[derive(Debug)]
pub struct HttpEmbedder {
    client: HttpClient,
    model: String,
    id: String,
}

impl HttpEmbedder {
    pub fn new(client: HttpClient, model: impl Into<String>) -> Self {
        let model = model.into();
        let id = format!("http:{}#{}", client.url(), model);
        Self { client, model, id }
    }
}

impl Embedder for HttpEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let resp: EmbeddingResponse = self
            .client
            .post_json(&EmbeddingRequest {
                model: &self.model,
                input: texts,
            })
            .map_err(Error::Generation)?;
        let mut data = resp.data;
        if data.iter().all(|d| d.index.is_some()) {
            data.sort_by_key(|d| d.index);
        }
        Ok(data.into_iter().map(|d| d.embedding).collect())
    }
}
