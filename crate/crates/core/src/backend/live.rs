use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::Deserialize;
use serde_json::json;

use super::{
    BackendError, CompletionBackend, CompletionRequest, CompletionResponse, ErrorCategory,
    Tokenizer,
};

pub const API_KEY_ENV: &str = "FEWSHOT_IE_API_KEY";
pub const ENDPOINT_ENV: &str = "FEWSHOT_IE_ENDPOINT";
pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1/completions";

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(20),
        }
    }
}

impl RetryPolicy {
    /// Backoff before retry number `attempt` (1-based): base * 2^(attempt-1),
    /// capped, plus up to 50% jitter.
    pub fn delay(&self, attempt: u32) -> Duration {
        let exp = self
            .base_delay
            .saturating_mul(1u32 << attempt.saturating_sub(1).min(16))
            .min(self.max_delay);
        let jitter = rand::thread_rng().gen_range(0.0..=0.5);
        exp + exp.mul_f64(jitter)
    }
}

/// Enforces a minimum interval between request starts across threads.
#[derive(Debug)]
pub struct RateLimiter {
    min_interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(min_interval: Duration) -> Self {
        Self {
            min_interval,
            next: Mutex::new(None),
        }
    }

    pub fn acquire(&self) {
        let wait = {
            let mut next = self.next.lock().unwrap();
            let now = Instant::now();
            let start = next.map_or(now, |n| n.max(now));
            *next = Some(start + self.min_interval);
            start - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

#[derive(Debug)]
struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone)]
pub struct LiveConfig {
    pub endpoint: String,
    pub api_key: String,
    pub timeout: Duration,
    pub max_in_flight: usize,
    pub min_interval: Duration,
    pub retry: RetryPolicy,
}

impl LiveConfig {
    pub fn new(endpoint: impl Into<String>, api_key: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: api_key.into(),
            timeout: Duration::from_secs(60),
            max_in_flight: 4,
            min_interval: Duration::ZERO,
            retry: RetryPolicy::default(),
        }
    }

    /// Reads the key from `FEWSHOT_IE_API_KEY` and the endpoint from
    /// `FEWSHOT_IE_ENDPOINT`, falling back to the public completions URL.
    pub fn from_env() -> Result<Self, BackendError> {
        let key = std::env::var(API_KEY_ENV)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| {
                BackendError::Config(format!("live backend requires the {API_KEY_ENV} variable"))
            })?;
        let endpoint = std::env::var(ENDPOINT_ENV).unwrap_or_else(|_| DEFAULT_ENDPOINT.into());
        Ok(Self::new(endpoint, key))
    }
}

pub struct LiveBackend {
    config: LiveConfig,
    client: reqwest::blocking::Client,
    tokenizer: Box<dyn Tokenizer>,
    limiter: RateLimiter,
    in_flight: Semaphore,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    text: String,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    tokens: Vec<String>,
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    top_logprobs: Option<Vec<Option<BTreeMap<String, f64>>>>,
}

impl LiveBackend {
    pub fn new(config: LiveConfig, tokenizer: Box<dyn Tokenizer>) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Config(format!("http client: {e}")))?;
        Ok(Self {
            limiter: RateLimiter::new(config.min_interval),
            in_flight: Semaphore::new(config.max_in_flight),
            config,
            client,
            tokenizer,
        })
    }

    fn wire_body(request: &CompletionRequest) -> serde_json::Value {
        let bias: BTreeMap<String, f64> = request
            .logit_bias
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        let mut body = json!({
            "model": request.model_id,
            "prompt": request.prompt_text,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
            "logit_bias": bias,
            "logprobs": request.want_logprobs,
        });
        if !request.stop.is_empty() {
            body["stop"] = json!(request.stop);
        }
        body
    }

    fn attempt(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let _permit = self.in_flight.acquire();
        self.limiter.acquire();
        let resp = self
            .client
            .post(&self.config.endpoint)
            .bearer_auth(&self.config.api_key)
            .json(&Self::wire_body(request))
            .send()
            .map_err(|e| provider(ErrorCategory::Transient, format!("request failed: {e}")))?;
        let status = resp.status();
        let body = resp
            .text()
            .map_err(|e| provider(ErrorCategory::Transient, format!("reading body: {e}")))?;
        if !status.is_success() {
            let category = match status.as_u16() {
                401 | 403 => ErrorCategory::Auth,
                429 => ErrorCategory::RateLimit,
                408 | 500..=599 => ErrorCategory::Transient,
                _ => ErrorCategory::Malformed,
            };
            return Err(provider(category, format!("HTTP {status}: {}", truncate(&body))));
        }
        parse_wire(&body)
    }
}

fn provider(category: ErrorCategory, message: String) -> BackendError {
    BackendError::Provider { category, message }
}

fn truncate(s: &str) -> &str {
    match s.char_indices().nth(200) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn parse_wire(body: &str) -> Result<CompletionResponse, BackendError> {
    let wire: WireResponse = serde_json::from_str(body)
        .map_err(|e| provider(ErrorCategory::Malformed, format!("response body: {e}")))?;
    let choice = wire
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| provider(ErrorCategory::Malformed, "no choices in response".into()))?;
    let response = match choice.logprobs {
        None => CompletionResponse {
            text: choice.text,
            ..CompletionResponse::default()
        },
        Some(lp) => CompletionResponse {
            text: choice.text,
            token_logprobs: lp
                .token_logprobs
                .into_iter()
                .map(|x| x.unwrap_or(0.0))
                .collect(),
            top_logprobs: lp
                .top_logprobs
                .unwrap_or_default()
                .into_iter()
                .map(Option::unwrap_or_default)
                .collect(),
            tokens: lp.tokens,
        },
    };
    response.validate()?;
    Ok(response)
}

impl CompletionBackend for LiveBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        request.validate()?;
        let mut attempt = 1;
        loop {
            match self.attempt(request) {
                Err(e) if e.is_retryable() && attempt < self.config.retry.max_attempts => {
                    let delay = self.config.retry.delay(attempt);
                    log::warn!("attempt {attempt} failed ({e}); retrying in {delay:?}");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        self.tokenizer.as_ref()
    }

    fn name(&self) -> &str {
        "live"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockTokenizer;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::Arc;

    /// Serves one canned (status, body) per connection, recording request bodies.
    fn fake_server(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/completions", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let seen2 = seen.clone();
        std::thread::spawn(move || {
            for (status, body) in replies {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                seen2.lock().unwrap().push(String::from_utf8(buf).unwrap());
                let resp = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
        });
        (url, seen)
    }

    fn backend(url: String) -> LiveBackend {
        let mut config = LiveConfig::new(url, "secret");
        config.retry.base_delay = Duration::from_millis(1);
        LiveBackend::new(config, Box::new(MockTokenizer::new())).unwrap()
    }

    const OK: &str = r#"{"choices":[{"text":" nausea","logprobs":{"tokens":[" nausea"],"token_logprobs":[-0.25],"top_logprobs":[{" nausea":-0.25," fever":-1.5}]}}]}"#;

    #[test]
    fn retries_transient_then_succeeds() {
        let (url, seen) = fake_server(vec![(503, "{}".into()), (200, OK.into())]);
        let b = backend(url);
        let mut req = CompletionRequest::new("davinci", "Sentence: x\nDiseases:");
        req.logit_bias.insert(198, 10.0);
        let resp = b.complete(&req).unwrap();
        assert_eq!(resp.text, " nausea");
        assert_eq!(resp.top_logprobs[0][" fever"], -1.5);
        let bodies = seen.lock().unwrap();
        assert_eq!(bodies.len(), 2);
        let sent: serde_json::Value = serde_json::from_str(&bodies[1]).unwrap();
        assert_eq!(sent["logit_bias"]["198"], 10.0);
        assert_eq!(sent["logprobs"], 5);
        assert_eq!(sent["temperature"], 0.0);
        assert_eq!(sent["stop"][0], "\n");
    }

    #[test]
    fn auth_errors_are_not_retried() {
        let (url, seen) = fake_server(vec![(401, "{}".into())]);
        let err = backend(url)
            .complete(&CompletionRequest::new("m", "p"))
            .unwrap_err();
        assert_eq!(err.category(), Some(ErrorCategory::Auth));
        assert_eq!(seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn rate_limit_gives_up_after_cap() {
        let (url, seen) = fake_server(vec![(429, "{}".into()); 3]);
        let err = backend(url)
            .complete(&CompletionRequest::new("m", "p"))
            .unwrap_err();
        assert_eq!(err.category(), Some(ErrorCategory::RateLimit));
        assert_eq!(seen.lock().unwrap().len(), 3);
    }

    #[test]
    fn malformed_body() {
        assert_eq!(
            parse_wire("{\"choices\":[]}").unwrap_err().category(),
            Some(ErrorCategory::Malformed)
        );
        assert!(parse_wire(r#"{"choices":[{"text":"a"}]}"#).is_ok());
    }

    #[test]
    fn backoff_grows_and_is_capped() {
        let p = RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(300),
        };
        let d1 = p.delay(1);
        assert!(d1 >= Duration::from_millis(100) && d1 <= Duration::from_millis(150));
        let d3 = p.delay(3);
        assert!(d3 >= Duration::from_millis(300) && d3 <= Duration::from_millis(450));
    }
}
