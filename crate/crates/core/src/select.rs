//! Dual-path retrieval and joint angular rescoring.
//!
//! Two independent top-`n` searches are run, one from the query embedding
//! and one from the pseudo-context embedding. Every document in their union
//! gets both similarities (looked up from the index even if only one path
//! found it) and is scored by `cos(θ₁ + θ₂)`, where `cos θ₁ = ⟨d, q⟩` and
//! `cos θ₂ = ⟨d, p⟩`. The top `k` by that score are kept.

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{ChunkLookup, DocChunk};
use crate::error::{Error, Result};
use crate::index::{rank_order, FlatIndex, Hit, UnitVector};

/// `cos(arccos s1 + arccos s2)` computed as
/// `s1·s2 − √(1−s1²)·√(1−s2²)` on inputs clamped to `[−1, 1]`.
pub fn joint_score(s1: f64, s2: f64) -> f64 {
    let a = s1.clamp(-1.0, 1.0);
    let b = s2.clamp(-1.0, 1.0);
    let sa = (1.0 - a * a).max(0.0).sqrt();
    let sb = (1.0 - b * b).max(0.0).sqrt();
    (a * b - sa * sb).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub s1: f64,
    pub s2: f64,
    pub joint: f64,
}

impl ScoredDoc {
    pub fn new(doc_id: impl Into<String>, s1: f64, s2: f64) -> Self {
        let s1 = s1.clamp(-1.0, 1.0);
        let s2 = s2.clamp(-1.0, 1.0);
        Self {
            doc_id: doc_id.into(),
            s1,
            s2,
            joint: joint_score(s1, s2),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PathHits {
    pub query: Vec<Hit>,
    pub pseudo: Vec<Hit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub selected: Vec<DocChunk>,
    /// The scored union, best first.
    pub candidates: Vec<ScoredDoc>,
    pub paths: PathHits,
    /// `arccos⟨q, p⟩` in radians. Diagnostic only.
    pub query_pseudo_angle: f64,
}

/// Runs the query-path and pseudo-path searches.
pub fn dual_retrieve(
    index: &FlatIndex,
    q_vec: &UnitVector,
    p_vec: &UnitVector,
    n: usize,
) -> Result<PathHits> {
    Ok(PathHits {
        query: index.search(q_vec, n)?,
        pseudo: index.search(p_vec, n)?,
    })
}

fn by_joint(a: &ScoredDoc, b: &ScoredDoc) -> Ordering {
    rank_order(a.joint, &a.doc_id, b.joint, &b.doc_id)
}

/// Scores the union of both hit lists and keeps the top `k`.
pub fn select(
    chunks: &ChunkLookup,
    paths: PathHits,
    q_vec: &UnitVector,
    p_vec: &UnitVector,
    k: usize,
    index: &FlatIndex,
) -> Result<SelectionResult> {
    if k == 0 {
        return Err(Error::Contract("selection size k must be at least 1".into()));
    }
    let mut seen = HashSet::new();
    let mut candidates = Vec::with_capacity(paths.query.len() + paths.pseudo.len());
    for hit in paths.query.iter().chain(&paths.pseudo) {
        if !seen.insert(hit.doc_id.as_str()) {
            continue;
        }
        let s1 = index.score(&hit.doc_id, q_vec)?;
        let s2 = index.score(&hit.doc_id, p_vec)?;
        candidates.push(ScoredDoc::new(hit.doc_id.clone(), s1, s2));
    }
    candidates.sort_by(by_joint);
    let selected = candidates
        .iter()
        .take(k)
        .map(|c| {
            chunks
                .get(&c.doc_id)
                .cloned()
                .ok_or_else(|| Error::Integrity(format!("doc {:?} missing from corpus", c.doc_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SelectionResult {
        selected,
        candidates,
        paths,
        query_pseudo_angle: q_vec.dot(p_vec).clamp(-1.0, 1.0).acos(),
    })
}

/// Takes the top `from_query` query-path hits, then up to `from_pseudo`
/// pseudo-path hits from the head of that list. A pseudo hit that is
/// already selected is replaced by the next unused query-path hit; if the
/// query path is exhausted, later pseudo hits fill in instead. No rescoring.
pub fn fixed_mix(paths: &PathHits, from_query: usize, from_pseudo: usize) -> Vec<String> {
    let mut picked: Vec<String> = Vec::with_capacity(from_query + from_pseudo);
    let mut taken: HashSet<&str> = HashSet::new();
    let mut q_iter = paths.query.iter();
    for hit in q_iter.by_ref().take(from_query) {
        if taken.insert(&hit.doc_id) {
            picked.push(hit.doc_id.clone());
        }
    }
    let mut p_iter = paths.pseudo.iter();
    let mut remaining = from_pseudo;
    while remaining > 0 {
        let Some(hit) = p_iter.next() else { break };
        if taken.insert(&hit.doc_id) {
            picked.push(hit.doc_id.clone());
            remaining -= 1;
            continue;
        }
        // Collision: backfill from the query path.
        if let Some(q) = q_iter.by_ref().find(|h| !taken.contains(h.doc_id.as_str())) {
            taken.insert(&q.doc_id);
            picked.push(q.doc_id.clone());
            remaining -= 1;
        }
    }
    picked
}
