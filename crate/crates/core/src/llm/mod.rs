//! Chat-completion backends.
//!
//! The model is a black box: a system message (empty by default) and one
//! user message go in, the first choice's text comes out. Transient
//! failures are retried with exponential backoff; answers can be memoized
//! on disk so identical requests are only ever paid for once.

mod cache;
pub mod http;
mod mock;
mod runner;

use std::fmt;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::{cached_complete, CacheLookup, ResponseCache};
pub use http::ChatCompletionsBackend;
pub use mock::{MockBackend, VULN_MARKER};
pub use runner::run_batch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendConfig {
    pub base_url: String,
    pub model_name: String,
    /// 0 for reproducible runs.
    pub temperature: f64,
    pub max_completion_tokens: u32,
    pub max_retries: u32,
    pub request_timeout: Duration,
    pub parallelism: usize,
    /// First backoff delay; doubles on each retry.
    pub retry_base_delay: Duration,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model_name: "gpt-3.5-turbo".into(),
            temperature: 0.0,
            max_completion_tokens: 256,
            max_retries: 3,
            request_timeout: Duration::from_secs(60),
            parallelism: 4,
            retry_base_delay: Duration::from_millis(500),
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidConfig(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_completion_tokens == 0 {
            return Err(LlmError::InvalidConfig("max_completion_tokens must be positive".into()));
        }
        if self.parallelism == 0 {
            return Err(LlmError::InvalidConfig("parallelism must be positive".into()));
        }
        Ok(())
    }
}

/// Body of `POST {base_url}/chat/completions`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(messages: &[ChatMessage], cfg: &BackendConfig) -> Self {
        Self {
            model: cfg.model_name.clone(),
            messages: messages.to_vec(),
            temperature: cfg.temperature,
            max_tokens: cfg.max_completion_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawAnswer {
    pub content: String,
    pub backend_fingerprint: String,
    pub cached: bool,
    pub latency: Option<Duration>,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum LlmError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("server error {status}: {excerpt}")]
    Server { status: u16, excerpt: String },
    #[error("connection failed: {0}")]
    Connection(String),
    #[error("malformed response body: {excerpt}")]
    Malformed { excerpt: String },
    #[error("request rejected ({status}): {excerpt}")]
    Rejected { status: u16, excerpt: String },
    #[error("invalid message sequence: {0}")]
    InvalidMessages(String),
    #[error("invalid backend configuration: {0}")]
    InvalidConfig(String),
}

impl LlmError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            LlmError::RateLimited(_)
                | LlmError::Timeout(_)
                | LlmError::Server { .. }
                | LlmError::Connection(_)
        )
    }
}

/// Something that turns one chat request into the first choice's text.
pub trait ChatBackend: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<String, LlmError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<T> {
    fn send(&self, request: &ChatRequest) -> Result<String, LlmError> {
        (**self).send(request)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn send(&self, request: &ChatRequest) -> Result<String, LlmError> {
        (**self).send(request)
    }
}

/// Hex SHA-256 over the canonical JSON of (model, temperature, max tokens,
/// messages). Used both as the cache key and inside the fingerprint.
pub fn request_digest(messages: &[ChatMessage], cfg: &BackendConfig) -> String {
    #[derive(Serialize)]
    struct Canonical<'a> {
        model_name: &'a str,
        temperature: f64,
        max_completion_tokens: u32,
        messages: &'a [ChatMessage],
    }
    let canonical = Canonical {
        model_name: &cfg.model_name,
        temperature: cfg.temperature,
        max_completion_tokens: cfg.max_completion_tokens,
        messages,
    };
    let bytes = serde_json::to_vec(&canonical).expect("canonical request serializes");
    hex::encode(Sha256::digest(bytes))
}

/// `model|t=temperature|prompt digest prefix`
pub fn fingerprint(messages: &[ChatMessage], cfg: &BackendConfig) -> String {
    Fingerprint {
        model: &cfg.model_name,
        temperature: cfg.temperature,
        digest: &request_digest(messages, cfg),
    }
    .to_string()
}

struct Fingerprint<'a> {
    model: &'a str,
    temperature: f64,
    digest: &'a str,
}

impl fmt::Display for Fingerprint<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|t={}|{}", self.model, self.temperature, &self.digest[..16])
    }
}

fn check_messages(messages: &[ChatMessage]) -> Result<(), LlmError> {
    match messages {
        [system, user] if system.role == Role::System && user.role == Role::User => {
            if user.content.trim().is_empty() {
                Err(LlmError::InvalidMessages("user message is empty".into()))
            } else {
                Ok(())
            }
        }
        _ => Err(LlmError::InvalidMessages(
            "expected exactly one system message followed by one user message".into(),
        )),
    }
}

/// Sends one request, retrying transient failures up to `cfg.max_retries`
/// times with delays `base, 2*base, 4*base, ...`.
pub fn complete(
    messages: &[ChatMessage],
    cfg: &BackendConfig,
    backend: &dyn ChatBackend,
) -> Result<RawAnswer, LlmError> {
    cfg.validate()?;
    check_messages(messages)?;
    let request = ChatRequest::new(messages, cfg);
    let started = Instant::now();
    let mut attempt = 0u32;
    loop {
        match backend.send(&request) {
            Ok(content) => {
                return Ok(RawAnswer {
                    content,
                    backend_fingerprint: fingerprint(messages, cfg),
                    cached: false,
                    latency: Some(started.elapsed()),
                })
            }
            Err(e) if e.is_retryable() && attempt < cfg.max_retries => {
                let delay = cfg.retry_base_delay.saturating_mul(1 << attempt.min(16));
                log::warn!("attempt {} failed ({e}); retrying in {delay:?}", attempt + 1);
                thread::sleep(delay);
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}
