//! Corpus and query-set loading.
//!
//! Both file kinds are JSON Lines: one object per line, UTF-8. Blank lines
//! are skipped. Corpora are expected to be pre-chunked; [`PassThroughChunker`]
//! is the only chunker shipped.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

/// One retrievable passage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocChunk {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

/// One evaluation question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryItem {
    pub id: String,
    pub question: String,
    #[serde(rename = "answers", default)]
    pub gold_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_doc_ids: Option<Vec<String>>,
}

/// Splits a raw document into chunks.
pub trait Chunker {
    fn chunk(&self, doc: DocChunk) -> Vec<DocChunk>;
}

/// Emits every document unchanged.
#[derive(Debug, Default, Clone, Copy)]
pub struct PassThroughChunker;

impl Chunker for PassThroughChunker {
    fn chunk(&self, doc: DocChunk) -> Vec<DocChunk> {
        vec![doc]
    }
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        out.push((lineno, record));
    }
    Ok(out)
}

/// Loads a pre-chunked corpus in file order, rejecting empty texts and
/// duplicate ids.
pub fn load_corpus(path: &Path) -> Result<Vec<DocChunk>> {
    let records: Vec<(usize, DocChunk)> = read_jsonl(path)?;
    let mut seen = HashSet::with_capacity(records.len());
    let mut chunks = Vec::with_capacity(records.len());
    for (line, chunk) in records {
        if chunk.text.trim().is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("chunk {:?} has empty text", chunk.id),
            });
        }
        if !seen.insert(chunk.id.clone()) {
            return Err(Error::Integrity(format!("duplicate chunk id {:?}", chunk.id)));
        }
        chunks.push(chunk);
    }
    Ok(chunks)
}

pub fn load_queries(path: &Path) -> Result<Vec<QueryItem>> {
    let records: Vec<(usize, QueryItem)> = read_jsonl(path)?;
    let mut seen = HashSet::with_capacity(records.len());
    let mut queries = Vec::with_capacity(records.len());
    for (line, query) in records {
        if query.question.trim().is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("query {:?} has an empty question", query.id),
            });
        }
        if !seen.insert(query.id.clone()) {
            return Err(Error::Integrity(format!("duplicate query id {:?}", query.id)));
        }
        queries.push(query);
    }
    Ok(queries)
}

/// Checks that every `gold_doc_ids` entry names a chunk in `corpus`.
pub fn validate_gold_ids(queries: &[QueryItem], corpus: &[DocChunk]) -> Result<()> {
    let ids: HashSet<&str> = corpus.iter().map(|c| c.id.as_str()).collect();
    for q in queries {
        for gold in q.gold_doc_ids.iter().flatten() {
            if !ids.contains(gold.as_str()) {
                return Err(Error::Integrity(format!(
                    "query {:?} references unknown gold doc {:?}",
                    q.id, gold
                )));
            }
        }
    }
    Ok(())
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Contract(format!("record is not serializable: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, chunks: &[DocChunk]) -> Result<()> {
    fsutil::write_atomic(path, to_jsonl(chunks)?.as_bytes())
}

pub fn write_queries(path: &Path, queries: &[QueryItem]) -> Result<()> {
    fsutil::write_atomic(path, to_jsonl(queries)?.as_bytes())
}

/// Id-keyed view over a chunk list.
#[derive(Debug, Clone, Default)]
pub struct ChunkLookup {
    chunks: Vec<DocChunk>,
    by_id: HashMap<String, usize>,
}

impl ChunkLookup {
    pub fn new(chunks: Vec<DocChunk>) -> Self {
        let by_id = chunks
            .iter()
            .enumerate()
            .map(|(i, c)| (c.id.clone(), i))
            .collect();
        Self { chunks, by_id }
    }

    pub fn get(&self, id: &str) -> Option<&DocChunk> {
        self.by_id.get(id).map(|&i| &self.chunks[i])
    }

    pub fn chunks(&self) -> &[DocChunk] {
        &self.chunks
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_in_file_order() {
        let f = write_tmp(
            "{\"id\":\"a\",\"text\":\"first\"}\n{\"id\":\"b\",\"title\":\"B\",\"text\":\"second\"}\n",
        );
        let chunks = load_corpus(f.path()).unwrap();
        let ids: Vec<_> = chunks.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
        assert_eq!(chunks[0].title, "");
        assert_eq!(chunks[1].title, "B");
    }

    #[test]
    fn duplicate_id_is_integrity_error() {
        let f = write_tmp("{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"a\",\"text\":\"y\"}\n");
        match load_corpus(f.path()) {
            Err(Error::Integrity(msg)) => assert!(msg.contains("\"a\"")),
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_names_line_number() {
        let f = write_tmp("{\"id\":\"a\",\"text\":\"x\"}\n\n{\"id\": \"b\"\n");
        match load_corpus(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn whitespace_text_is_rejected() {
        let f = write_tmp("{\"id\":\"a\",\"text\":\"  \\n \"}\n");
        assert!(matches!(load_corpus(f.path()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn titled_record_round_trips() {
        let chunk = DocChunk {
            id: "5a8b57f25542995d1e6f1371".into(),
            title: "Scott Derrickson".into(),
            text: "Scott Derrickson (born July 16, 1966) is an American director.".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_corpus(&path, std::slice::from_ref(&chunk)).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), vec![chunk]);
    }

    #[test]
    fn queries_use_answers_field() {
        let f = write_tmp(
            "{\"id\":\"q1\",\"question\":\"Capital of France?\",\"answers\":[\"Paris\"],\"gold_doc_ids\":[\"a\"]}\n",
        );
        let qs = load_queries(f.path()).unwrap();
        assert_eq!(qs[0].gold_answers, ["Paris"]);
        assert_eq!(qs[0].gold_doc_ids.as_deref(), Some(&["a".to_string()][..]));
    }

    #[test]
    fn gold_ids_must_exist() {
        let corpus = vec![DocChunk {
            id: "a".into(),
            title: String::new(),
            text: "t".into(),
        }];
        let mut q = QueryItem {
            id: "q".into(),
            question: "?".into(),
            gold_answers: vec!["x".into()],
            gold_doc_ids: Some(vec!["a".into()]),
        };
        validate_gold_ids(std::slice::from_ref(&q), &corpus).unwrap();
        q.gold_doc_ids = Some(vec!["zz".into()]);
        assert!(matches!(
            validate_gold_ids(&[q], &corpus),
            Err(Error::Integrity(_))
        ));
    }
}
