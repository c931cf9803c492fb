//! Demonstration selection: kNN over sentence embeddings and a seeded random baseline.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{fnv1a32, fold_case, sha256_hex};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("no precomputed embedding for example {0}")]
    MissingId(String),
    #[error("embedding dimension {got} does not match pool dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding for {0} contains non-finite values")]
    NonFinite(String),
    #[error("embedding provider unreachable: {0}")]
    Unreachable(String),
    #[error("embedding provider returned an unexpected payload: {0}")]
    Malformed(String),
    #[error("cannot read embedding file {path}: {message}")]
    File { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub source_id: String,
    pub values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub similarity: f64,
}

/// Cosine similarity in f64. Zero vectors have similarity 0 to everything.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// The `k` candidates most similar to `query`, ties broken by ascending id.
///
/// The result is ordered least-similar first so that, once rendered, the
/// closest demonstration sits right before the test block.
pub fn knn_select(query: &EmbeddingVector, pool: &[&EmbeddingVector], k: usize) -> Vec<Neighbor> {
    let mut scored: Vec<Neighbor> = pool
        .iter()
        .map(|c| Neighbor {
            id: c.source_id.clone(),
            similarity: cosine(&query.values, &c.values),
        })
        .collect();
    scored.sort_by(|a, b| {
        b.similarity
            .total_cmp(&a.similarity)
            .then_with(|| a.id.cmp(&b.id))
    });
    scored.truncate(k);
    scored.reverse();
    scored
}

/// Seeded sample of `k` items without replacement, in sampled order.
pub fn random_select<T: Clone>(pool: &[T], k: usize, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = k.min(pool.len());
    index::sample(&mut rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect()
}

/// Turns a sentence into a vector.
pub trait EmbeddingProvider: Send + Sync {
    /// Stable name folded into cache keys.
    fn name(&self) -> &str;
    fn embed(&self, id: &str, text: &str) -> Result<Vec<f32>, RetrievalError>;
}

#[derive(Debug, Deserialize, Serialize)]
struct EmbeddingRecord {
    id: String,
    dim: usize,
    values: Vec<f32>,
}

/// Offline embeddings keyed by example id, loaded from a JSONL file of
/// `{"id", "dim", "values"}` records.
#[derive(Debug, Clone)]
pub struct PrecomputedEmbeddings {
    name: String,
    by_id: HashMap<String, Vec<f32>>,
    dim: usize,
}

impl PrecomputedEmbeddings {
    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let file_err = |message: String| RetrievalError::File {
            path: path.display().to_string(),
            message,
        };
        let raw = fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
        let mut by_id = HashMap::new();
        let mut dim = None;
        for (i, line) in raw.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: EmbeddingRecord = serde_json::from_str(line)
                .map_err(|e| file_err(format!("line {}: {e}", i + 1)))?;
            if rec.values.len() != rec.dim {
                return Err(file_err(format!(
                    "line {}: declared dim {} but {} values",
                    i + 1,
                    rec.dim,
                    rec.values.len()
                )));
            }
            if rec.values.iter().any(|v| !v.is_finite()) {
                return Err(RetrievalError::NonFinite(rec.id));
            }
            let expected = *dim.get_or_insert(rec.dim);
            if expected != rec.dim {
                return Err(RetrievalError::DimensionMismatch {
                    expected,
                    got: rec.dim,
                });
            }
            by_id.insert(rec.id, rec.values);
        }
        Ok(Self {
            name: format!("precomputed:{}", sha256_hex(raw.as_bytes())),
            by_id,
            dim: dim.unwrap_or(0),
        })
    }

    pub fn from_map(by_id: HashMap<String, Vec<f32>>) -> Self {
        let dim = by_id.values().next().map_or(0, Vec::len);
        Self {
            name: "precomputed:memory".into(),
            by_id,
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl EmbeddingProvider for PrecomputedEmbeddings {
    fn name(&self) -> &str {
        &self.name
    }

    fn embed(&self, id: &str, _text: &str) -> Result<Vec<f32>, RetrievalError> {
        self.by_id
            .get(id)
            .cloned()
            .ok_or_else(|| RetrievalError::MissingId(id.to_string()))
    }
}

/// Signed feature hashing of lowercased word unigrams and bigrams.
///
/// A dependency-free lexical encoder for offline runs and tests.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
    name: String,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self {
            dim,
            name: format!("hashing:{dim}"),
        }
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn embed(&self, _id: &str, text: &str) -> Result<Vec<f32>, RetrievalError> {
        let folded = fold_case(text);
        let words: Vec<&str> = folded
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .collect();
        let mut v = vec![0f32; self.dim];
        let mut add = |feature: &str, weight: f32| {
            let h = fnv1a32(feature.as_bytes());
            let sign = if h & 0x8000_0000 == 0 { 1.0 } else { -1.0 };
            v[(h as usize) % self.dim] += sign * weight;
        };
        for w in &words {
            add(w, 1.0);
        }
        for pair in words.windows(2) {
            add(&format!("{} {}", pair[0], pair[1]), 0.5);
        }
        Ok(v)
    }
}

/// Remote encoder: POST `{"model", "input"}`, accepts `{"embedding": [...]}`
/// or `{"data": [{"embedding": [...]}]}`.
pub struct HttpEmbeddingProvider {
    url: String,
    model: Option<String>,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    name: String,
}

impl HttpEmbeddingProvider {
    pub fn new(url: impl Into<String>, model: Option<String>, api_key: Option<String>) -> Self {
        let url = url.into();
        let name = format!("http:{}:{}", url, model.as_deref().unwrap_or(""));
        Self {
            url,
            model,
            api_key,
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(60))
                .build()
                .expect("http client"),
            name,
        }
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn embed(&self, _id: &str, text: &str) -> Result<Vec<f32>, RetrievalError> {
        let mut req = self
            .client
            .post(&self.url)
            .json(&serde_json::json!({ "model": self.model, "input": text }));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| RetrievalError::Unreachable(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(RetrievalError::Unreachable(format!("HTTP {status}")));
        }
        let body: serde_json::Value = resp
            .json()
            .map_err(|e| RetrievalError::Malformed(e.to_string()))?;
        let values = body
            .get("embedding")
            .or_else(|| body.pointer("/data/0/embedding"))
            .and_then(|v| v.as_array())
            .ok_or_else(|| RetrievalError::Malformed("no embedding field".into()))?;
        values
            .iter()
            .map(|x| {
                x.as_f64()
                    .map(|f| f as f32)
                    .ok_or_else(|| RetrievalError::Malformed("non-numeric value".into()))
            })
            .collect()
    }
}

/// Caching front for a provider. Results are keyed by a digest of the
/// provider name and the text; all vectors must share one dimension.
pub struct Embedder {
    provider: Box<dyn EmbeddingProvider>,
    cache: RwLock<HashMap<String, Arc<EmbeddingVector>>>,
    dim: AtomicUsize,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl Embedder {
    pub fn new(provider: Box<dyn EmbeddingProvider>) -> Self {
        Self {
            provider,
            cache: RwLock::new(HashMap::new()),
            dim: AtomicUsize::new(0),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    /// Pins the expected dimension up front.
    pub fn with_dim(self, dim: usize) -> Self {
        self.dim.store(dim, Ordering::SeqCst);
        self
    }

    pub fn dim(&self) -> Option<usize> {
        match self.dim.load(Ordering::SeqCst) {
            0 => None,
            d => Some(d),
        }
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    fn key(&self, text: &str) -> String {
        sha256_hex(format!("{}\u{0}{}", self.provider.name(), text).as_bytes())
    }

    pub fn embed(&self, id: &str, text: &str) -> Result<EmbeddingVector, RetrievalError> {
        let key = self.key(text);
        if let Some(v) = self.cache.read().unwrap().get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(EmbeddingVector {
                source_id: id.to_string(),
                values: v.values.clone(),
            });
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let values = self.provider.embed(id, text)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RetrievalError::NonFinite(id.to_string()));
        }
        match self
            .dim
            .compare_exchange(0, values.len(), Ordering::SeqCst, Ordering::SeqCst)
        {
            Ok(_) => {}
            Err(expected) if expected == values.len() => {}
            Err(expected) => {
                return Err(RetrievalError::DimensionMismatch {
                    expected,
                    got: values.len(),
                })
            }
        }
        let vector = EmbeddingVector {
            source_id: id.to_string(),
            values,
        };
        self.cache
            .write()
            .unwrap()
            .entry(key)
            .or_insert_with(|| Arc::new(vector.clone()));
        Ok(vector)
    }
}
