#![allow(dead_code)]

use gaterag::corpus::{ChunkLookup, DocChunk, QueryItem};
use gaterag::embed::{embed_texts, EmbedOptions, Embedder, EmbeddingCache, ScriptedEmbedder};
use gaterag::generate::{render_prompt, Gateway, MockGenerator, ScriptEntry, TemplateKind};
use gaterag::index::FlatIndex;
use gaterag::pipeline::Pipeline;

pub fn doc(id: &str, text: &str) -> DocChunk {
    DocChunk {
        id: id.into(),
        title: String::new(),
        text: text.into(),
    }
}

pub fn query(id: &str, question: &str, answers: &[&str], gold: &[&str]) -> QueryItem {
    QueryItem {
        id: id.into(),
        question: question.into(),
        gold_answers: answers.iter().map(|s| s.to_string()).collect(),
        gold_doc_ids: (!gold.is_empty()).then(|| gold.iter().map(|s| s.to_string()).collect()),
    }
}

pub fn prompt(kind: TemplateKind, question: &str) -> String {
    render_prompt(kind, question, None).unwrap()
}

pub fn build_pipeline(
    docs: Vec<DocChunk>,
    embedder: Box<dyn Embedder>,
    script: Vec<ScriptEntry>,
) -> Pipeline {
    let cache = EmbeddingCache::in_memory();
    let texts: Vec<String> = docs.iter().map(|d| d.text.clone()).collect();
    let vecs = embed_texts(&texts, embedder.as_ref(), &cache, EmbedOptions::default()).unwrap();
    let index = FlatIndex::build(&docs, &vecs).unwrap();
    let gateway = Gateway::uncached(Box::new(MockGenerator::new(script)));
    Pipeline::new(index, ChunkLookup::new(docs), embedder, cache, gateway).unwrap()
}

pub fn unit(dim: usize, axis: usize) -> Vec<f32> {
    let mut v = vec![0.0; dim];
    v[axis] = 1.0;
    v
}

/// A corpus where every text maps to a hand-placed vector.
pub struct AxisWorld {
    pub dim: usize,
    pub docs: Vec<DocChunk>,
    pub vectors: Vec<(String, Vec<f32>)>,
}

impl AxisWorld {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            docs: Vec::new(),
            vectors: Vec::new(),
        }
    }

    /// Adds a document with the given coefficients, topped up to unit
    /// length along `own_axis`.
    pub fn add_doc(&mut self, id: &str, coeffs: &[(usize, f64)], own_axis: usize) {
        let mut v = vec![0.0f64; self.dim];
        for &(axis, c) in coeffs {
            v[axis] = c;
        }
        let used: f64 = v.iter().map(|x| x * x).sum();
        assert!(used <= 1.0, "doc {id} over-full");
        assert_eq!(v[own_axis], 0.0);
        v[own_axis] = (1.0 - used).sqrt();
        let text = format!("Passage [{id}] body.");
        self.docs.push(doc(id, &text));
        self.vectors.push((text, v.iter().map(|&x| x as f32).collect()));
    }

    pub fn add_text(&mut self, text: &str, v: Vec<f32>) {
        self.vectors.push((text.to_string(), v));
    }

    pub fn doc_text(&self, id: &str) -> &str {
        &self.docs.iter().find(|d| d.id == id).unwrap().text
    }

    pub fn embedder(&self) -> Box<dyn Embedder> {
        Box::new(ScriptedEmbedder::new("axis-world", self.vectors.clone()))
    }
}
