//! Completion backends.
//!
//! Every language-model call goes through [`CompletionBackend`]. The crate
//! ships a live HTTP client, a gold-answer oracle, a closure-driven scripted
//! mock, and a record/replay cache that wraps any of them.

mod cache;
mod live;
mod oracle;
mod scripted;
mod tokenizer;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{cache_key, CacheKey, CacheMode, CachedBackend, ReplayStore, StoredEntry};
pub use live::{LiveBackend, LiveConfig, RateLimiter, RetryPolicy, API_KEY_ENV, DEFAULT_ENDPOINT, ENDPOINT_ENV};
pub use oracle::OracleBackend;
pub use scripted::ScriptedBackend;
pub use tokenizer::{BpeTokenizer, MockTokenizer, Tokenizer};

pub const MAX_LOGIT_BIAS_ENTRIES: usize = 300;
pub const MAX_LOGPROBS: u8 = 5;
pub const DEFAULT_LOGPROBS: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    Auth,
    RateLimit,
    Transient,
    Malformed,
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ErrorCategory::Auth => "auth",
            ErrorCategory::RateLimit => "rate-limit",
            ErrorCategory::Transient => "transient",
            ErrorCategory::Malformed => "malformed",
        })
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("replay cache miss for key {0}")]
    CacheMiss(CacheKey),
    #[error("provider error ({category}): {message}")]
    Provider {
        category: ErrorCategory,
        message: String,
    },
    #[error("replay store already holds a different response for key {0}")]
    Corruption(CacheKey),
    #[error("invalid completion request: {0}")]
    InvalidRequest(String),
    #[error("replay store io error: {0}")]
    Store(String),
    #[error("missing configuration: {0}")]
    Config(String),
}

impl BackendError {
    pub fn category(&self) -> Option<ErrorCategory> {
        match self {
            BackendError::Provider { category, .. } => Some(*category),
            _ => None,
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(
            self.category(),
            Some(ErrorCategory::RateLimit | ErrorCategory::Transient)
        )
    }
}

/// One completion call. Temperature is pinned to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model_id: String,
    pub prompt_text: String,
    pub max_tokens: usize,
    pub temperature: f64,
    pub stop: Vec<String>,
    pub logit_bias: BTreeMap<u32, f64>,
    pub want_logprobs: u8,
}

impl CompletionRequest {
    pub fn new(model_id: impl Into<String>, prompt_text: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            prompt_text: prompt_text.into(),
            max_tokens: 64,
            temperature: 0.0,
            stop: vec!["\n".to_string()],
            logit_bias: BTreeMap::new(),
            want_logprobs: DEFAULT_LOGPROBS,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.temperature != 0.0 {
            return Err(BackendError::InvalidRequest("temperature must be 0".into()));
        }
        if self.logit_bias.len() > MAX_LOGIT_BIAS_ENTRIES {
            return Err(BackendError::InvalidRequest(format!(
                "{} logit-bias entries exceed the limit of {MAX_LOGIT_BIAS_ENTRIES}",
                self.logit_bias.len()
            )));
        }
        if self.want_logprobs > MAX_LOGPROBS {
            return Err(BackendError::InvalidRequest(format!(
                "logprobs {} exceeds {MAX_LOGPROBS}",
                self.want_logprobs
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub tokens: Vec<String>,
    pub token_logprobs: Vec<f64>,
    pub top_logprobs: Vec<BTreeMap<String, f64>>,
}

impl CompletionResponse {
    /// A response whose every token was chosen with probability one.
    pub fn certain(text: &str, tokenizer: &dyn Tokenizer) -> Self {
        let tokens = tokenizer.token_strings(text);
        Self {
            text: text.to_string(),
            token_logprobs: vec![0.0; tokens.len()],
            top_logprobs: tokens
                .iter()
                .map(|t| BTreeMap::from([(t.clone(), 0.0)]))
                .collect(),
            tokens,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let malformed = |message: String| BackendError::Provider {
            category: ErrorCategory::Malformed,
            message,
        };
        if self.tokens.len() != self.token_logprobs.len()
            || (!self.top_logprobs.is_empty() && self.top_logprobs.len() != self.tokens.len())
        {
            return Err(malformed(format!(
                "misaligned logprobs: {} tokens, {} logprobs, {} top entries",
                self.tokens.len(),
                self.token_logprobs.len(),
                self.top_logprobs.len()
            )));
        }
        let all = self
            .token_logprobs
            .iter()
            .chain(self.top_logprobs.iter().flat_map(|m| m.values()));
        for &lp in all {
            if lp.is_nan() || lp > 0.0 {
                return Err(malformed(format!("log-probability {lp} is not <= 0")));
            }
        }
        Ok(())
    }

    /// Top alternatives at the first generated position, if any.
    pub fn first_top_logprobs(&self) -> Option<&BTreeMap<String, f64>> {
        self.top_logprobs.first()
    }
}

pub trait CompletionBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError>;

    /// Tokenizer matching the model, used to build logit-bias maps.
    fn tokenizer(&self) -> &dyn Tokenizer;

    fn name(&self) -> &str;

    /// Digest summarising the cache state, when the backend has one.
    fn cache_digest(&self) -> Option<String> {
        None
    }
}
