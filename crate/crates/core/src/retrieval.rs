//! Code embeddings and exhaustive cosine top-k search.
//!
//! The built-in [`LexicalEmbedder`] is a TF-IDF model fitted on the training
//! code. [`RemoteEmbedder`] delegates to an HTTP embedding service for
//! neural encoders. Either way the index stores one vector per training
//! sample and remembers the embedder fingerprint so a stale index is never
//! queried with vectors from a different model.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Dataset;
use crate::llm::http::{HttpRequest, HttpTransport};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot embed empty code")]
    EmptyCode,
    #[error("embedding has non-finite component at position {0}")]
    NonFinite(usize),
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("embedding service unreachable: {cause}")]
    Unreachable { cause: String },
    #[error("embedding service returned an unusable response: {0}")]
    BadResponse(String),
    #[error("sample {id}: {source}")]
    Sample {
        id: String,
        #[source]
        source: Box<RetrievalError>,
    },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("duplicate sample id {0:?} in training set")]
    DuplicateId(String),
    #[error("index was built with embedder {index}, active embedder is {active}")]
    FingerprintMismatch { index: String, active: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl RetrievalError {
    /// Whether trying again later might succeed.
    pub fn is_retryable(&self) -> bool {
        match self {
            RetrievalError::Unreachable { .. } => true,
            RetrievalError::Sample { source, .. } => source.is_retryable(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, RetrievalError> {
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(RetrievalError::NonFinite(pos));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn scaled(&self, c: f64) -> EmbeddingVector {
        EmbeddingVector {
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }
}

/// Cosine similarity, clamped to `[-1, 1]`.
///
/// A zero vector has no direction; its similarity to anything is 0 and a
/// warning is logged.
pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, RetrievalError> {
    if u.dim() != v.dim() {
        return Err(RetrievalError::DimMismatch {
            left: u.dim(),
            right: v.dim(),
        });
    }
    let dot: f64 = u.values.iter().zip(&v.values).map(|(a, b)| a * b).sum();
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        log::warn!("cosine similarity with a zero vector defined as 0");
        return Ok(0.0);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

pub trait Embedder: Send + Sync {
    fn embed(&self, code: &str) -> Result<EmbeddingVector, RetrievalError>;

    /// Identifies the model and its parameters; equal fingerprints must mean
    /// equal vectors for equal input.
    fn fingerprint(&self) -> String;
}

/// Lowercased alphanumeric runs of length >= 2.
pub fn tokenize(code: &str) -> impl Iterator<Item = String> + '_ {
    code.split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 2)
        .map(str::to_lowercase)
}

/// TF-IDF bag of tokens over a vocabulary fitted on a corpus, L2-normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexicalEmbedder {
    vocabulary: BTreeMap<String, usize>,
    idf: Vec<f64>,
}

impl LexicalEmbedder {
    /// Smoothed inverse document frequency: `ln((1 + N) / (1 + df)) + 1`.
    pub fn fit<'a>(documents: impl IntoIterator<Item = &'a str>) -> Self {
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        let mut n_docs = 0usize;
        for doc in documents {
            n_docs += 1;
            let unique: HashSet<String> = tokenize(doc).collect();
            for token in unique {
                *df.entry(token).or_default() += 1;
            }
        }
        let vocabulary = df.keys().cloned().zip(0..).collect();
        let idf = df
            .values()
            .map(|&d| ((1.0 + n_docs as f64) / (1.0 + d as f64)).ln() + 1.0)
            .collect();
        Self { vocabulary, idf }
    }

    /// Raw term frequencies over a fixed vocabulary (all weights 1).
    pub fn with_uniform_weights<S: AsRef<str>>(vocabulary: &[S]) -> Self {
        let mut tokens: Vec<String> = vocabulary.iter().map(|s| s.as_ref().to_lowercase()).collect();
        tokens.sort();
        tokens.dedup();
        let idf = vec![1.0; tokens.len()];
        Self {
            vocabulary: tokens.into_iter().zip(0..).collect(),
            idf,
        }
    }

    pub fn dim(&self) -> usize {
        self.idf.len()
    }

    /// Weighted counts before normalization, indexed like the vocabulary.
    pub fn weights(&self, code: &str) -> Vec<f64> {
        let mut values = vec![0.0; self.dim()];
        for token in tokenize(code) {
            if let Some(&i) = self.vocabulary.get(&token) {
                values[i] += self.idf[i];
            }
        }
        values
    }

    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        self.vocabulary.keys().map(String::as_str)
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let text = serde_json::to_string(self).expect("embedder serializes");
        fs::write(path, text).map_err(|source| RetrievalError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let text = fs::read_to_string(path).map_err(|source| RetrievalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let model: Self = serde_json::from_str(&text).map_err(|e| RetrievalError::Format {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if model.vocabulary.len() != model.idf.len()
            || model.vocabulary.values().any(|&i| i >= model.idf.len())
        {
            return Err(RetrievalError::Format {
                path: path.to_path_buf(),
                line: 1,
                message: "vocabulary and weights disagree".into(),
            });
        }
        Ok(model)
    }
}

impl Embedder for LexicalEmbedder {
    fn embed(&self, code: &str) -> Result<EmbeddingVector, RetrievalError> {
        if code.trim().is_empty() {
            return Err(RetrievalError::EmptyCode);
        }
        let mut values = self.weights(code);
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        EmbeddingVector::new(values)
    }

    fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for (token, &i) in &self.vocabulary {
            hasher.update(token.as_bytes());
            hasher.update([0]);
            hasher.update(self.idf[i].to_bits().to_le_bytes());
        }
        let digest = hex::encode(hasher.finalize());
        format!("lexical-tfidf-v1:{}:{}", self.dim(), &digest[..16])
    }
}

/// Client for an embedding service: `POST {base_url}/embeddings` with
/// `{model, input}`, reading `data[0].embedding`.
pub struct RemoteEmbedder {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    transport: Arc<dyn HttpTransport>,
}

impl RemoteEmbedder {
    pub fn new(
        base_url: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        transport: Arc<dyn HttpTransport>,
    ) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key,
            timeout: Duration::from_secs(60),
            transport,
        }
    }
}

impl Embedder for RemoteEmbedder {
    fn embed(&self, code: &str) -> Result<EmbeddingVector, RetrievalError> {
        if code.trim().is_empty() {
            return Err(RetrievalError::EmptyCode);
        }
        let request = HttpRequest {
            url: format!("{}/embeddings", self.base_url.trim_end_matches('/')),
            body: json!({ "model": self.model, "input": code }).to_string(),
            bearer: self.api_key.clone(),
            timeout: self.timeout,
        };
        let response = self
            .transport
            .post_json(&request)
            .map_err(|e| RetrievalError::Unreachable { cause: e.to_string() })?;
        if response.status == 429 || response.status >= 500 {
            return Err(RetrievalError::Unreachable {
                cause: format!("HTTP {}", response.status),
            });
        }
        if response.status != 200 {
            return Err(RetrievalError::BadResponse(format!(
                "HTTP {}: {}",
                response.status,
                excerpt(&response.body)
            )));
        }
        let body: serde_json::Value = serde_json::from_str(&response.body)
            .map_err(|e| RetrievalError::BadResponse(format!("{e}: {}", excerpt(&response.body))))?;
        let values: Vec<f64> = body["data"][0]["embedding"]
            .as_array()
            .and_then(|a| a.iter().map(|v| v.as_f64()).collect())
            .ok_or_else(|| RetrievalError::BadResponse(excerpt(&response.body)))?;
        EmbeddingVector::new(values)
    }

    fn fingerprint(&self) -> String {
        format!("remote:{}@{}", self.model, self.base_url.trim_end_matches('/'))
    }
}

fn excerpt(body: &str) -> String {
    body.chars().take(200).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub id: String,
    pub vector: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub id: String,
    /// Position of the entry in the index.
    pub position: usize,
    pub similarity: f64,
}

/// Immutable after construction; safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    entries: Vec<IndexEntry>,
    embedder_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    format: String,
    embedder: String,
    dim: usize,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct IndexRecord {
    id: String,
    dim: usize,
    values: Vec<f64>,
}

const INDEX_FORMAT: &str = "vpl-retrieval-index-v1";

impl RetrievalIndex {
    /// Validates the shared dimension and id uniqueness.
    pub fn from_entries(
        entries: Vec<IndexEntry>,
        embedder_fingerprint: impl Into<String>,
    ) -> Result<Self, RetrievalError> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(RetrievalError::DuplicateId(e.id.clone()));
            }
            if e.vector.dim() != entries[0].vector.dim() {
                return Err(RetrievalError::DimMismatch {
                    left: entries[0].vector.dim(),
                    right: e.vector.dim(),
                });
            }
        }
        Ok(Self {
            entries,
            embedder_fingerprint: embedder_fingerprint.into(),
        })
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.first().map(|e| e.vector.dim())
    }

    pub fn embedder_fingerprint(&self) -> &str {
        &self.embedder_fingerprint
    }

    pub fn check_fingerprint(&self, embedder: &dyn Embedder) -> Result<(), RetrievalError> {
        let active = embedder.fingerprint();
        if active != self.embedder_fingerprint {
            return Err(RetrievalError::FingerprintMismatch {
                index: self.embedder_fingerprint.clone(),
                active,
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let io_err = |source| RetrievalError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = BufWriter::new(fs::File::create(path).map_err(io_err)?);
        let header = IndexHeader {
            format: INDEX_FORMAT.into(),
            embedder: self.embedder_fingerprint.clone(),
            dim: self.dim().unwrap_or(0),
            count: self.entries.len(),
        };
        writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes")).map_err(io_err)?;
        for e in &self.entries {
            let record = IndexRecord {
                id: e.id.clone(),
                dim: e.vector.dim(),
                values: e.vector.values.clone(),
            };
            writeln!(out, "{}", serde_json::to_string(&record).expect("record serializes")).map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }

    /// Loads an index and verifies it was built by `embedder`.
    pub fn load(path: &Path, embedder: &dyn Embedder) -> Result<Self, RetrievalError> {
        let io_err = |source| RetrievalError::Io {
            path: path.to_path_buf(),
            source,
        };
        let format_err = |line: usize, message: String| RetrievalError::Format {
            path: path.to_path_buf(),
            line,
            message,
        };
        let reader = BufReader::new(fs::File::open(path).map_err(io_err)?);
        let mut lines = reader.lines();
        let header_text = lines
            .next()
            .ok_or_else(|| format_err(1, "missing header".into()))?
            .map_err(io_err)?;
        let header: IndexHeader =
            serde_json::from_str(&header_text).map_err(|e| format_err(1, e.to_string()))?;
        if header.format != INDEX_FORMAT {
            return Err(format_err(1, format!("unknown format {:?}", header.format)));
        }
        let active = embedder.fingerprint();
        if header.embedder != active {
            return Err(RetrievalError::FingerprintMismatch {
                index: header.embedder,
                active,
            });
        }
        let mut entries = Vec::with_capacity(header.count);
        for (idx, line) in lines.enumerate() {
            let line_no = idx + 2;
            let text = line.map_err(io_err)?;
            if text.trim().is_empty() {
                continue;
            }
            let record: IndexRecord =
                serde_json::from_str(&text).map_err(|e| format_err(line_no, e.to_string()))?;
            if record.dim != record.values.len() || record.dim != header.dim {
                return Err(format_err(line_no, format!("dim {} does not match values", record.dim)));
            }
            let vector = EmbeddingVector::new(record.values).map_err(|e| format_err(line_no, e.to_string()))?;
            entries.push(IndexEntry { id: record.id, vector });
        }
        if entries.len() != header.count {
            return Err(format_err(
                1,
                format!("header announces {} entries, found {}", header.count, entries.len()),
            ));
        }
        Self::from_entries(entries, header.embedder)
    }
}

/// One entry per sample of `train`, in order.
pub fn build_index(train: &Dataset, embedder: &dyn Embedder) -> Result<RetrievalIndex, RetrievalError> {
    if train.is_empty() {
        return Err(RetrievalError::EmptyTrainingSet);
    }
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(train.len());
    for sample in &train.samples {
        if !seen.insert(sample.id.as_str()) {
            return Err(RetrievalError::DuplicateId(sample.id.clone()));
        }
        let vector = embedder.embed(&sample.code).map_err(|e| RetrievalError::Sample {
            id: sample.id.clone(),
            source: Box::new(e),
        })?;
        entries.push(IndexEntry {
            id: sample.id.clone(),
            vector,
        });
    }
    RetrievalIndex::from_entries(entries, embedder.fingerprint())
}

/// The `k` most similar entries, best first; equal similarities keep index order.
pub fn top_k(index: &RetrievalIndex, query: &EmbeddingVector, k: usize) -> Result<Vec<Hit>, RetrievalError> {
    if index.is_empty() || k == 0 {
        return Ok(Vec::new());
    }
    let mut scored = index
        .entries
        .iter()
        .enumerate()
        .map(|(position, e)| Ok((position, cosine(&e.vector, query)?)))
        .collect::<Result<Vec<_>, RetrievalError>>()?;
    let rank = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    let k = k.min(scored.len());
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank);
        scored.truncate(k);
    }
    scored.sort_unstable_by(rank);
    Ok(scored
        .into_iter()
        .map(|(position, similarity)| Hit {
            id: index.entries[position].id.clone(),
            position,
            similarity,
        })
        .collect())
}
