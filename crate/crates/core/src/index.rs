//! Exact inner-product search over unit vectors.
//!
//! The index is a flat row-major `f32` matrix. Scores are accumulated in
//! `f64` in dimension order, so a naive scan that sums the same way produces
//! bit-identical scores. Ties are broken by ascending doc id.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::DocChunk;
use crate::error::{Error, Result};

/// Tolerance on `| ‖v‖₂ − 1 |` for every vector the crate accepts.
pub const NORM_TOLERANCE: f64 = 1e-6;

const SNAPSHOT_MAGIC: &[u8; 4] = b"GRIX";
const SNAPSHOT_VERSION: u32 = 1;

/// An L2-normalized embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVector(Arc<[f32]>);

impl UnitVector {
    /// Divides `raw` by its L2 norm. Fails on empty, zero or non-finite input.
    pub fn normalize(raw: &[f32]) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Contract("cannot normalize an empty vector".into()));
        }
        let norm = raw
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::Contract(format!(
                "cannot normalize a vector with norm {norm}"
            )));
        }
        Ok(Self(
            raw.iter().map(|&x| (f64::from(x) / norm) as f32).collect(),
        ))
    }

    /// Wraps values that are already unit length, checking the norm.
    pub fn from_normalized(values: Vec<f32>) -> Result<Self> {
        let v = Self(values.into());
        let err = (v.norm() - 1.0).abs();
        if v.0.is_empty() || err.is_nan() || err > NORM_TOLERANCE {
            return Err(Error::Contract(format!(
                "vector norm deviates from 1 by {err:e}"
            )));
        }
        Ok(v)
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt()
    }

    /// Inner product; panics on dimension mismatch.
    pub fn dot(&self, other: &UnitVector) -> f64 {
        dot(&self.0, &other.0)
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "dimension mismatch");
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += f64::from(*x) * f64::from(*y);
    }
    acc
}

/// One search result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub doc_id: String,
    pub score: f64,
}

/// Score descending, then doc id ascending.
pub fn rank_order(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

/// Immutable flat index. Cheap to clone.
#[derive(Debug, Clone)]
pub struct FlatIndex {
    inner: Arc<IndexData>,
}

#[derive(Debug)]
struct IndexData {
    dim: usize,
    ids: Vec<String>,
    matrix: Vec<f32>,
    row_of: HashMap<String, usize>,
}

impl FlatIndex {
    pub fn build(chunks: &[DocChunk], vectors: &[UnitVector]) -> Result<Self> {
        if chunks.len() != vectors.len() {
            return Err(Error::Index(format!(
                "{} chunks but {} vectors",
                chunks.len(),
                vectors.len()
            )));
        }
        let ids = chunks.iter().map(|c| c.id.clone()).collect();
        Self::from_parts(ids, vectors)
    }

    fn from_parts(ids: Vec<String>, vectors: &[UnitVector]) -> Result<Self> {
        let Some(first) = vectors.first() else {
            return Err(Error::Index("cannot build an empty index".into()));
        };
        let dim = first.dim();
        let mut matrix = Vec::with_capacity(dim * vectors.len());
        for (i, v) in vectors.iter().enumerate() {
            if v.dim() != dim {
                return Err(Error::Index(format!(
                    "vector {i} has dimension {} but the index has {dim}",
                    v.dim()
                )));
            }
            matrix.extend_from_slice(v.values());
        }
        let mut row_of = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if row_of.insert(id.clone(), i).is_some() {
                return Err(Error::Integrity(format!("duplicate doc id {id:?} in index")));
            }
        }
        Ok(Self {
            inner: Arc::new(IndexData {
                dim,
                ids,
                matrix,
                row_of,
            }),
        })
    }

    pub fn dim(&self) -> usize {
        self.inner.dim
    }

    pub fn len(&self) -> usize {
        self.inner.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.inner.ids
    }

    fn row(&self, i: usize) -> &[f32] {
        let d = self.inner.dim;
        &self.inner.matrix[i * d..(i + 1) * d]
    }

    /// Stored vector for `doc_id`.
    pub fn vector(&self, doc_id: &str) -> Option<&[f32]> {
        self.inner.row_of.get(doc_id).map(|&i| self.row(i))
    }

    /// Inner product between a stored document and `probe`.
    pub fn score(&self, doc_id: &str, probe: &UnitVector) -> Result<f64> {
        self.check_dim(probe)?;
        let row = self
            .vector(doc_id)
            .ok_or_else(|| Error::Integrity(format!("doc {doc_id:?} is not in the index")))?;
        Ok(dot(row, probe.values()))
    }

    fn check_dim(&self, probe: &UnitVector) -> Result<()> {
        if probe.dim() != self.inner.dim {
            return Err(Error::Index(format!(
                "probe dimension {} does not match index dimension {}",
                probe.dim(),
                self.inner.dim
            )));
        }
        Ok(())
    }

    /// Top `n` documents by inner product with `probe`.
    pub fn search(&self, probe: &UnitVector, n: usize) -> Result<Vec<Hit>> {
        if n == 0 {
            return Err(Error::Contract("search size n must be at least 1".into()));
        }
        self.check_dim(probe)?;
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            .map(|i| (dot(self.row(i), probe.values()), i))
            .collect();
        let ids = &self.inner.ids;
        let cmp = |a: &(f64, usize), b: &(f64, usize)| rank_order(a.0, &ids[a.1], b.0, &ids[b.1]);
        let n = n.min(scored.len());
        if n < scored.len() {
            scored.select_nth_unstable_by(n - 1, cmp);
            scored.truncate(n);
        }
        scored.sort_unstable_by(cmp);
        Ok(scored
            .into_iter()
            .map(|(score, i)| Hit {
                doc_id: ids[i].clone(),
                score,
            })
            .collect())
    }

    /// Writes the snapshot: magic, version, dimension, count, the doc-id
    /// table (u32 length + UTF-8 bytes each) and the little-endian `f32`
    /// matrix.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(24 + self.inner.matrix.len() * 4);
        buf.extend_from_slice(SNAPSHOT_MAGIC);
        buf.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.inner.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for id in &self.inner.ids {
            buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
        }
        for x in &self.inner.matrix {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        crate::fsutil::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |what: &str| Error::Index(format!("{}: {what}", path.display()));
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, path)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(bad("not an index snapshot"));
        }
        if read_u32(&mut r, path)? != SNAPSHOT_VERSION {
            return Err(bad("unsupported snapshot version"));
        }
        let dim = read_u32(&mut r, path)? as usize;
        let count = read_u64(&mut r, path)? as usize;
        if dim == 0 || count == 0 {
            return Err(bad("empty snapshot"));
        }
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(&mut r, path)? as usize;
            let mut bytes = vec![0u8; len];
            read_exact(&mut r, &mut bytes, path)?;
            ids.push(String::from_utf8(bytes).map_err(|_| bad("doc id is not UTF-8"))?);
        }
        let mut vectors = Vec::with_capacity(count);
        let mut row = vec![0u8; dim * 4];
        for _ in 0..count {
            read_exact(&mut r, &mut row, path)?;
            let values = row
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            vectors.push(UnitVector::from_normalized(values)?);
        }
        Self::from_parts(ids, &vectors)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::io(path, e))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path)?;
    Ok(u64::from_le_bytes(b))
}
