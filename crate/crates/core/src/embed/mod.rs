//! Text embedding with a persistent content-addressed cache.

mod backends;
mod cache;

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

pub use backends::{HashingEmbedder, HttpEmbedder, ScriptedEmbedder};
pub use cache::{cache_key, EmbeddingCache, SharedCache};

use crate::error::{Error, Result};
use crate::index::UnitVector;

/// Maps a batch of texts to raw (not necessarily normalized) vectors.
pub trait Embedder: Send + Sync {
    /// Stable identity; part of every cache key.
    fn id(&self) -> &str;

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>>;
}

#[derive(Debug, Clone, Copy)]
pub struct EmbedOptions {
    pub batch_size: usize,
    pub max_in_flight: usize,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_in_flight: 4,
        }
    }
}

/// Embeds `texts`, serving what it can from `cache` and renormalizing
/// everything the embedder returns. Identical texts within one call are sent
/// once.
pub fn embed_texts(
    texts: &[String],
    embedder: &dyn Embedder,
    cache: &EmbeddingCache,
    opts: EmbedOptions,
) -> Result<Vec<UnitVector>> {
    let keys: Vec<String> = texts.iter().map(|t| cache_key(embedder.id(), t)).collect();

    // Unique misses in first-occurrence order, with every input position.
    let mut pending: Vec<(String, Vec<usize>)> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for (i, key) in keys.iter().enumerate() {
        if cache.get(key).is_some() {
            continue;
        }
        match slot.get(key.as_str()) {
            Some(&j) => pending[j].1.push(i),
            None => {
                slot.insert(key, pending.len());
                pending.push((key.clone(), vec![i]));
            }
        }
    }

    if !pending.is_empty() {
        let batch_size = opts.batch_size.max(1);
        let batches: Vec<&[(String, Vec<usize>)]> = pending.chunks(batch_size).collect();
        let results: Mutex<Vec<Option<Result<Vec<UnitVector>>>>> =
            Mutex::new((0..batches.len()).map(|_| None).collect());
        let next = AtomicUsize::new(0);
        let workers = opts.max_in_flight.max(1).min(batches.len());

        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let b = next.fetch_add(1, Ordering::Relaxed);
                    let Some(batch) = batches.get(b) else { break };
                    let out = run_batch(batch, texts, embedder);
                    results.lock().expect("results lock")[b] = Some(out);
                });
            }
        });

        for (batch, out) in batches.iter().zip(results.into_inner().expect("results lock")) {
            let vectors = out.expect("every batch ran")?;
            for ((key, _), v) in batch.iter().zip(vectors) {
                cache.insert(key.clone(), v)?;
            }
        }
    }

    keys.iter()
        .map(|k| {
            cache
                .get(k)
                .ok_or_else(|| Error::Contract("embedding missing from cache after fill".into()))
        })
        .collect()
}

fn run_batch(
    batch: &[(String, Vec<usize>)],
    texts: &[String],
    embedder: &dyn Embedder,
) -> Result<Vec<UnitVector>> {
    let indices: Vec<usize> = batch.iter().map(|(_, pos)| pos[0]).collect();
    let fail = |message: String| Error::Embedding {
        indices: indices.clone(),
        message,
    };
    let inputs: Vec<String> = indices.iter().map(|&i| texts[i].clone()).collect();
    let raw = embedder.embed_batch(&inputs).map_err(|e| fail(e.to_string()))?;
    if raw.len() != inputs.len() {
        return Err(fail(format!(
            "embedder returned {} vectors for {} texts",
            raw.len(),
            inputs.len()
        )));
    }
    raw.iter()
        .map(|v| UnitVector::normalize(v).map_err(|e| fail(e.to_string())))
        .collect()
}
