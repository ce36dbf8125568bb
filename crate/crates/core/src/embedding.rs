//! Text embeddings for retrieval.
//!
//! The default backend is a feature-hashing embedder that needs no model
//! weights: text is lowercased and split on every non-alphanumeric
//! character; each token contributes itself plus all character trigrams of
//! `#token#`. Every feature is hashed with FNV-1a 64, bucketed by
//! `hash % d` and signed by bit 63 (`+1` when clear, `-1` when set). The
//! accumulated vector is L2-normalized; text without tokens maps to the
//! all-zero vector.
//!
//! The remote backend posts to an embeddings endpoint speaking the common
//! `{"model", "input": [..]}` / `{"data": [{"embedding": [..]}]}` shape.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_DIMENSION: usize = 256;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding request failed: {0}")]
    Transport(String),
    #[error("embedding service returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("malformed embedding response: {0}")]
    MalformedResponse(String),
    #[error("invalid embedder config: {0}")]
    InvalidConfig(String),
}

/// A unit-norm or all-zero vector of fixed dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Normalizes `values` to unit length. Non-finite input is rejected;
    /// an all-zero input stays all-zero.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::MalformedResponse(
                "vector contains non-finite values".into(),
            ));
        }
        l2_normalize(&mut values);
        Ok(Self(values))
    }

    /// Wraps raw values without normalizing. Used for stored index vectors
    /// that were normalized when written.
    pub fn from_raw(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(dimension: usize) -> Self {
        Self(vec![0.0; dimension])
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum EmbedderBackend {
    Hashing,
    Remote { endpoint: String, model: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub dimension: usize,
    #[serde(flatten)]
    pub backend: EmbedderBackend,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            dimension: DEFAULT_DIMENSION,
            backend: EmbedderBackend::Hashing,
        }
    }
}

impl EmbedderConfig {
    pub fn hashing(dimension: usize) -> Self {
        Self {
            dimension,
            backend: EmbedderBackend::Hashing,
        }
    }

    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dimension == 0 {
            return Err(EmbedError::InvalidConfig(
                "dimension must be positive".into(),
            ));
        }
        if let EmbedderBackend::Remote { endpoint, model } = &self.backend {
            if endpoint.trim().is_empty() {
                return Err(EmbedError::InvalidConfig("remote endpoint is empty".into()));
            }
            if model.trim().is_empty() {
                return Err(EmbedError::InvalidConfig(
                    "remote model name is empty".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Embeds text according to an [`EmbedderConfig`].
#[derive(Debug, Clone)]
pub struct Embedder {
    config: EmbedderConfig,
    client: Option<reqwest::blocking::Client>,
}

impl Embedder {
    pub fn new(config: EmbedderConfig) -> Result<Self, EmbedError> {
        config.validate()?;
        let client = match config.backend {
            EmbedderBackend::Hashing => None,
            EmbedderBackend::Remote { .. } => Some(
                reqwest::blocking::Client::builder()
                    .timeout(Duration::from_secs(60))
                    .build()
                    .map_err(|e| EmbedError::Transport(e.to_string()))?,
            ),
        };
        Ok(Self { config, client })
    }

    pub fn hashing(dimension: usize) -> Self {
        Self {
            config: EmbedderConfig::hashing(dimension),
            client: None,
        }
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn dimension(&self) -> usize {
        self.config.dimension
    }

    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        match &self.config.backend {
            EmbedderBackend::Hashing => Ok(hash_embed(text, self.config.dimension)),
            EmbedderBackend::Remote { endpoint, model } => {
                let client = self
                    .client
                    .as_ref()
                    .expect("remote embedder is always built with a client");
                remote_embed(client, endpoint, model, text, self.config.dimension)
            }
        }
    }
}

impl Default for Embedder {
    fn default() -> Self {
        Self::hashing(DEFAULT_DIMENSION)
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// Splits lowercased text into maximal runs of alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

fn for_each_feature(token: &str, mut f: impl FnMut(&str)) {
    f(token);
    let padded: Vec<char> = std::iter::once('#')
        .chain(token.chars())
        .chain(std::iter::once('#'))
        .collect();
    let mut buf = String::with_capacity(12);
    for window in padded.windows(3) {
        buf.clear();
        buf.extend(window);
        f(&buf);
    }
}

pub fn hash_embed(text: &str, dimension: usize) -> EmbeddingVector {
    let mut values = vec![0.0f64; dimension];
    if dimension == 0 {
        return EmbeddingVector(values);
    }
    for token in tokenize(text) {
        for_each_feature(&token, |feature| {
            let h = fnv1a64(feature.as_bytes());
            let bucket = (h % dimension as u64) as usize;
            values[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        });
    }
    l2_normalize(&mut values);
    EmbeddingVector(values)
}

fn l2_normalize(values: &mut [f64]) {
    let sum: f64 = values.iter().map(|v| v * v).sum();
    if sum == 0.0 {
        return;
    }
    let norm = sum.sqrt();
    for v in values.iter_mut() {
        *v /= norm;
    }
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: [&'a str; 1],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

fn remote_embed(
    client: &reqwest::blocking::Client,
    endpoint: &str,
    model: &str,
    text: &str,
    dimension: usize,
) -> Result<EmbeddingVector, EmbedError> {
    let response = client
        .post(endpoint)
        .json(&EmbeddingRequest {
            model,
            input: [text],
        })
        .send()
        .map_err(|e| EmbedError::Transport(e.to_string()))?;
    let status = response.status();
    let body = response
        .text()
        .map_err(|e| EmbedError::Transport(e.to_string()))?;
    if !status.is_success() {
        return Err(EmbedError::Status {
            status: status.as_u16(),
            body,
        });
    }
    let parsed: EmbeddingResponse =
        serde_json::from_str(&body).map_err(|e| EmbedError::MalformedResponse(e.to_string()))?;
    let first = parsed
        .data
        .into_iter()
        .next()
        .ok_or_else(|| EmbedError::MalformedResponse("empty data array".into()))?;
    if first.embedding.len() != dimension {
        return Err(EmbedError::DimensionMismatch {
            expected: dimension,
            actual: first.embedding.len(),
        });
    }
    EmbeddingVector::normalized(first.embedding)
}
