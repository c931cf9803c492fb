use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{BackendError, CompletionBackend, CompletionRequest, CompletionResponse, Tokenizer};
use crate::text::sha256_hex;

const KEY_VERSION: &str = "fewshot-ie/completion/v1";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    fn parse(s: &str) -> Option<Self> {
        (s.len() == 64 && s.bytes().all(|b| b.is_ascii_hexdigit())).then(|| Self(s.to_string()))
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Serialize)]
struct Canonical<'a> {
    version: &'a str,
    model_id: &'a str,
    prompt_text: String,
    max_tokens: usize,
    temperature: f64,
    stop: Vec<String>,
    logit_bias: &'a BTreeMap<u32, f64>,
    want_logprobs: u8,
}

fn normalize_newlines(s: &str) -> String {
    s.replace("\r\n", "\n").replace('\r', "\n")
}

/// SHA-256 over a fixed-order JSON rendering of the request.
pub fn cache_key(request: &CompletionRequest) -> CacheKey {
    let canonical = Canonical {
        version: KEY_VERSION,
        model_id: &request.model_id,
        prompt_text: normalize_newlines(&request.prompt_text),
        max_tokens: request.max_tokens,
        temperature: request.temperature,
        stop: request.stop.iter().map(|s| normalize_newlines(s)).collect(),
        logit_bias: &request.logit_bias,
        want_logprobs: request.want_logprobs,
    };
    let bytes = serde_json::to_vec(&canonical).expect("canonical request serializes");
    CacheKey(sha256_hex(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredEntry {
    pub key: CacheKey,
    pub request: CompletionRequest,
    pub response: CompletionResponse,
}

/// Append-only directory of `{key}.json` files.
#[derive(Debug)]
pub struct ReplayStore {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl ReplayStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| store_err(&dir, e))?;
        Ok(Self {
            dir,
            write_lock: Mutex::new(()),
        })
    }

    /// Opens a store that must already exist.
    pub fn open_existing(dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        if !dir.is_dir() {
            return Err(BackendError::Config(format!(
                "replay cache {} does not exist",
                dir.display()
            )));
        }
        Self::open(dir)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_of(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<StoredEntry>, BackendError> {
        let path = self.path_of(key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(store_err(&path, e)),
        };
        let entry: StoredEntry =
            serde_json::from_slice(&bytes).map_err(|_| BackendError::Corruption(key.clone()))?;
        if &entry.key != key {
            return Err(BackendError::Corruption(key.clone()));
        }
        Ok(Some(entry))
    }

    /// Stores a pair. Re-storing an identical pair is a no-op; a different
    /// payload under an existing key is rejected.
    pub fn put(
        &self,
        request: &CompletionRequest,
        response: &CompletionResponse,
    ) -> Result<CacheKey, BackendError> {
        let key = cache_key(request);
        let entry = StoredEntry {
            key: key.clone(),
            request: request.clone(),
            response: response.clone(),
        };
        let _guard = self.write_lock.lock().unwrap();
        if let Some(existing) = self.get(&key)? {
            return if existing.response == entry.response {
                Ok(key)
            } else {
                Err(BackendError::Corruption(key))
            };
        }
        let path = self.path_of(&key);
        let bytes = serde_json::to_vec_pretty(&entry).expect("entry serializes");
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(|e| store_err(&self.dir, e))?;
        tmp.write_all(&bytes).map_err(|e| store_err(&path, e))?;
        tmp.persist_noclobber(&path)
            .map_err(|e| store_err(&path, e.error))?;
        Ok(key)
    }

    pub fn keys(&self) -> Result<Vec<CacheKey>, BackendError> {
        let mut keys = Vec::new();
        for entry in fs::read_dir(&self.dir).map_err(|e| store_err(&self.dir, e))? {
            let entry = entry.map_err(|e| store_err(&self.dir, e))?;
            let name = entry.file_name();
            let Some(stem) = name.to_str().and_then(|n| n.strip_suffix(".json")) else {
                continue;
            };
            if let Some(key) = CacheKey::parse(stem) {
                keys.push(key);
            }
        }
        keys.sort();
        Ok(keys)
    }

    pub fn len(&self) -> Result<usize, BackendError> {
        Ok(self.keys()?.len())
    }

    pub fn is_empty(&self) -> Result<bool, BackendError> {
        Ok(self.len()? == 0)
    }

    /// Deletes every entry not in `keep`; returns how many were removed.
    pub fn retain(&self, keep: &BTreeSet<CacheKey>) -> Result<usize, BackendError> {
        let _guard = self.write_lock.lock().unwrap();
        let mut removed = 0;
        for key in self.keys()? {
            if !keep.contains(&key) {
                let path = self.path_of(&key);
                fs::remove_file(&path).map_err(|e| store_err(&path, e))?;
                removed += 1;
            }
        }
        Ok(removed)
    }
}

fn store_err(path: &Path, e: std::io::Error) -> BackendError {
    BackendError::Store(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheMode {
    /// Serve hits from the store, forward misses to the inner backend and store them.
    Record,
    /// Serve hits only; a miss is an error.
    Replay,
}

pub struct CachedBackend {
    inner: Option<Arc<dyn CompletionBackend>>,
    tokenizer: Option<Box<dyn Tokenizer>>,
    store: Arc<ReplayStore>,
    mode: CacheMode,
    name: String,
    touched: Mutex<BTreeSet<CacheKey>>,
}

impl CachedBackend {
    pub fn record(inner: Arc<dyn CompletionBackend>, store: Arc<ReplayStore>) -> Self {
        let name = format!("record({})", inner.name());
        Self {
            inner: Some(inner),
            tokenizer: None,
            store,
            mode: CacheMode::Record,
            name,
            touched: Mutex::new(BTreeSet::new()),
        }
    }

    pub fn replay(store: Arc<ReplayStore>, tokenizer: Box<dyn Tokenizer>) -> Self {
        Self {
            inner: None,
            tokenizer: Some(tokenizer),
            store,
            mode: CacheMode::Replay,
            name: "replay".to_string(),
            touched: Mutex::new(BTreeSet::new()),
        }
    }

    pub fn mode(&self) -> CacheMode {
        self.mode
    }

    pub fn store(&self) -> &ReplayStore {
        &self.store
    }

    /// Keys read or written through this backend so far.
    pub fn touched_keys(&self) -> BTreeSet<CacheKey> {
        self.touched.lock().unwrap().clone()
    }
}

impl CompletionBackend for CachedBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        request.validate()?;
        let key = cache_key(request);
        if let Some(entry) = self.store.get(&key)? {
            self.touched.lock().unwrap().insert(key);
            return Ok(entry.response);
        }
        let inner = match (&self.inner, self.mode) {
            (Some(inner), CacheMode::Record) => inner,
            _ => return Err(BackendError::CacheMiss(key)),
        };
        let response = inner.complete(request)?;
        response.validate()?;
        let key = self.store.put(request, &response)?;
        self.touched.lock().unwrap().insert(key);
        Ok(response)
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        match (&self.inner, &self.tokenizer) {
            (Some(inner), _) => inner.tokenizer(),
            (None, Some(t)) => t.as_ref(),
            (None, None) => unreachable!("cached backend always has a tokenizer source"),
        }
    }

    fn name(&self) -> &str {
        &self.name
    }

    fn cache_digest(&self) -> Option<String> {
        let touched = self.touched.lock().unwrap();
        let joined: Vec<&str> = touched.iter().map(|k| k.as_str()).collect();
        Some(sha256_hex(joined.join("\n").as_bytes()))
    }
}
