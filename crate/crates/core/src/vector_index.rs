//! Flat (exhaustive) cosine-similarity index.
//!
//! Results are ordered by score descending with ties broken by id
//! ascending, so every query has exactly one correct answer.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbedError, Embedder, EmbeddingVector};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("duplicate index id {0:?}")]
    DuplicateId(String),
    #[error("recall requires at least one evaluation case")]
    NoCases,
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub vector: EmbeddingVector,
    pub payload_ref: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalEvalCase {
    pub query: String,
    pub relevant_ids: BTreeSet<String>,
}

/// Cosine similarity clamped to `[-1, 1]`; zero when either side is the
/// zero vector.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, IndexError> {
    if a.dimension() != b.dimension() {
        return Err(IndexError::DimensionMismatch {
            expected: a.dimension(),
            actual: b.dimension(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.values().iter().zip(b.values()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

pub(crate) fn hit_order(a: &SearchHit, b: &SearchHit) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id))
}

#[derive(Debug, Clone, Default)]
pub struct FlatIndex {
    dimension: usize,
    entries: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    dimension: usize,
    entry_count: usize,
}

impl FlatIndex {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            entries: Vec::new(),
        }
    }

    pub fn build(
        dimension: usize,
        entries: impl IntoIterator<Item = IndexEntry>,
    ) -> Result<Self, IndexError> {
        let mut index = Self::new(dimension);
        let mut seen = HashSet::new();
        for entry in entries {
            if entry.vector.dimension() != dimension {
                return Err(IndexError::DimensionMismatch {
                    expected: dimension,
                    actual: entry.vector.dimension(),
                });
            }
            if !seen.insert(entry.id.clone()) {
                return Err(IndexError::DuplicateId(entry.id));
            }
            index.entries.push(entry);
        }
        Ok(index)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&IndexEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn top_k(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<SearchHit>, IndexError> {
        if query.dimension() != self.dimension {
            return Err(IndexError::DimensionMismatch {
                expected: self.dimension,
                actual: query.dimension(),
            });
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        let mut hits = self
            .entries
            .iter()
            .map(|e| {
                Ok(SearchHit {
                    id: e.id.clone(),
                    score: cosine_similarity(&e.vector, query)?,
                })
            })
            .collect::<Result<Vec<_>, IndexError>>()?;
        if k < hits.len() {
            hits.select_nth_unstable_by(k - 1, hit_order);
            hits.truncate(k);
        }
        hits.sort_by(hit_order);
        Ok(hits)
    }

    /// Fraction of cases with at least one relevant id among the top `k`
    /// hits for the embedded query.
    pub fn recall_at_k(
        &self,
        cases: &[RetrievalEvalCase],
        embedder: &Embedder,
        k: usize,
    ) -> Result<f64, IndexError> {
        if cases.is_empty() {
            return Err(IndexError::NoCases);
        }
        let mut found = 0usize;
        for case in cases {
            let hits = self.top_k(&embedder.embed_text(&case.query)?, k)?;
            if hits.iter().any(|h| case.relevant_ids.contains(&h.id)) {
                found += 1;
            }
        }
        Ok(found as f64 / cases.len() as f64)
    }

    /// Writes a JSON header line followed by one JSON line per entry.
    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let io_err = |source| IndexError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
        let header = IndexHeader {
            dimension: self.dimension,
            entry_count: self.entries.len(),
        };
        writeln!(
            out,
            "{}",
            serde_json::to_string(&header).expect("header serializes")
        )
        .map_err(io_err)?;
        for entry in &self.entries {
            writeln!(
                out,
                "{}",
                serde_json::to_string(entry).expect("entry serializes")
            )
            .map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let display = path.display().to_string();
        let file = File::open(path).map_err(|source| IndexError::Io {
            path: display.clone(),
            source,
        })?;
        let format = |line: usize, message: String| IndexError::Format {
            path: display.clone(),
            line,
            message,
        };
        let mut lines = BufReader::new(file).lines();
        let header: IndexHeader = match lines.next() {
            Some(line) => {
                let line = line.map_err(|source| IndexError::Io {
                    path: display.clone(),
                    source,
                })?;
                serde_json::from_str(&line).map_err(|e| format(1, e.to_string()))?
            }
            None => return Err(format(1, "missing header".into())),
        };
        let mut entries = Vec::with_capacity(header.entry_count);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|source| IndexError::Io {
                path: display.clone(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: IndexEntry =
                serde_json::from_str(&line).map_err(|e| format(i + 2, e.to_string()))?;
            entries.push(entry);
        }
        if entries.len() != header.entry_count {
            return Err(format(
                1,
                format!(
                    "header declares {} entries, file holds {}",
                    header.entry_count,
                    entries.len()
                ),
            ));
        }
        Self::build(header.dimension, entries)
    }
}
