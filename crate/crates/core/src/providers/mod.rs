//! Chat-completion and embedding providers.
//!
//! Everything that talks to an LLM goes through [`ChatProvider`] or
//! [`EmbeddingProvider`]. The HTTP implementation is configured entirely by
//! request templates so one client covers OpenAI, Gemini and Llama style
//! endpoints; the mock implementation is a seeded, invertible codebook used
//! by every offline test.

mod http;
mod mock;

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use http::{HttpChatProvider, HttpEmbeddingProvider, TokenBucket};
pub use mock::{MockChat, MockCodebook, MockEmbedder};

/// Default temperature for obfuscation requests.
pub const OBFUSCATION_TEMPERATURE: f64 = 1.0;
/// Default temperature for inference requests.
pub const INFERENCE_TEMPERATURE: f64 = 0.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProviderError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("request timed out")]
    Timeout,
    #[error("rate limited by provider")]
    RateLimited,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("provider returned status {status}: {body}")]
    Status { status: u16, body: String },
}

impl ProviderError {
    /// Transport-level failures worth retrying.
    pub fn is_retryable(&self) -> bool {
        match self {
            ProviderError::Timeout | ProviderError::RateLimited | ProviderError::Transport(_) => true,
            ProviderError::Status { status, .. } => *status >= 500,
            ProviderError::Auth(_) | ProviderError::Malformed(_) => false,
        }
    }
}

/// A single chat completion request. `sample` distinguishes repeated draws
/// for the same input (retry attempts, variant rounds).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub temperature: f64,
    #[serde(default)]
    pub sample: u32,
    /// Forwarded to providers that accept a sampling seed.
    #[serde(default)]
    pub seed: u64,
}

impl ChatRequest {
    pub fn new(system: impl Into<String>, user: impl Into<String>, temperature: f64) -> Self {
        Self { system: system.into(), user: user.into(), temperature, sample: 0, seed: 0 }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_sample(mut self, sample: u32) -> Self {
        self.sample = sample;
        self
    }

    /// Hash used in logs in place of the payload.
    pub fn payload_hash(&self) -> String {
        payload_hash(&[&self.system, &self.user])
    }
}

pub fn payload_hash(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    hex::encode(&hasher.finalize()[..8])
}

pub trait ChatProvider: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<String, ProviderError>;
}

pub trait EmbeddingProvider: Send + Sync {
    fn embed_raw(&self, text: &str, dim: usize) -> Result<Vec<f64>, ProviderError>;
}

impl<T: ChatProvider + ?Sized> ChatProvider for Arc<T> {
    fn chat(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        (**self).chat(request)
    }
}

impl<T: EmbeddingProvider + ?Sized> EmbeddingProvider for Arc<T> {
    fn embed_raw(&self, text: &str, dim: usize) -> Result<Vec<f64>, ProviderError> {
        (**self).embed_raw(text, dim)
    }
}

impl<T: ChatProvider + ?Sized> ChatProvider for &T {
    fn chat(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        (**self).chat(request)
    }
}

impl<T: EmbeddingProvider + ?Sized> EmbeddingProvider for &T {
    fn embed_raw(&self, text: &str, dim: usize) -> Result<Vec<f64>, ProviderError> {
        (**self).embed_raw(text, dim)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Total attempts including the first one.
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, base_delay_ms: 500, max_delay_ms: 8_000 }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_attempts: u32) -> Self {
        Self { max_attempts, base_delay_ms: 0, max_delay_ms: 0 }
    }

    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u64 << attempt.min(16);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

/// Runs `op` until it succeeds, fails with a non-retryable error or the
/// attempt budget is spent. Backoff doubles after every failure.
pub fn with_retry<T>(
    policy: &RetryPolicy,
    mut op: impl FnMut() -> Result<T, ProviderError>,
) -> Result<T, ProviderError> {
    let attempts = policy.max_attempts.max(1);
    let mut attempt = 0;
    loop {
        match op() {
            Ok(v) => return Ok(v),
            Err(e) if e.is_retryable() && attempt + 1 < attempts => {
                log::warn!("provider call failed ({e}); retry {} of {}", attempt + 1, attempts - 1);
                thread::sleep(policy.delay(attempt));
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Wraps any provider with [`with_retry`].
pub struct Retrying<P> {
    pub inner: P,
    pub policy: RetryPolicy,
}

impl<P> Retrying<P> {
    pub fn new(inner: P, policy: RetryPolicy) -> Self {
        Self { inner, policy }
    }
}

impl<P: ChatProvider> ChatProvider for Retrying<P> {
    fn chat(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        with_retry(&self.policy, || self.inner.chat(request))
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for Retrying<P> {
    fn embed_raw(&self, text: &str, dim: usize) -> Result<Vec<f64>, ProviderError> {
        with_retry(&self.policy, || self.inner.embed_raw(text, dim))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    HttpChat,
    HttpEmbed,
    Mock,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MockMode {
    /// Encodes each token through the codebook.
    #[default]
    Codebook,
    /// Decodes codebook glyphs back to text (a perfect attacker).
    Inverse,
    /// Returns `mock_constant` for every request.
    Constant,
    /// Returns the user message unchanged.
    Echo,
}

/// Provider settings. Secrets are referenced by environment variable name
/// only and never stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub auth_env: Option<String>,
    pub auth_header: String,
    pub auth_prefix: String,
    pub timeout_secs: f64,
    pub retry: RetryPolicy,
    /// Requests per second shared by all users of one client.
    pub rate_limit_per_sec: Option<f64>,
    /// JSON body with `{{model}}`, `{{system}}`, `{{user}}`, `{{temperature}}`,
    /// `{{seed}}`, `{{input}}` and `{{dim}}` placeholders.
    pub request_template: Option<serde_json::Value>,
    /// JSON pointer to the completion text or embedding array.
    pub response_pointer: Option<String>,
    pub mock_seed: u64,
    pub mock_mode: MockMode,
    pub mock_constant: String,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Mock,
            base_url: String::new(),
            model: String::new(),
            auth_env: None,
            auth_header: "Authorization".into(),
            auth_prefix: "Bearer ".into(),
            timeout_secs: 60.0,
            retry: RetryPolicy::default(),
            rate_limit_per_sec: None,
            request_template: None,
            response_pointer: None,
            mock_seed: 0,
            mock_mode: MockMode::Codebook,
            mock_constant: "unknown".into(),
        }
    }
}

impl ProviderConfig {
    pub fn mock(seed: u64, mode: MockMode) -> Self {
        Self { mock_seed: seed, mock_mode: mode, ..Self::default() }
    }

    /// Every problem with the config, not just the first.
    pub fn validate(&self, role: &str) -> Vec<String> {
        let mut problems = Vec::new();
        if self.kind != ProviderKind::Mock {
            if self.base_url.is_empty() {
                problems.push(format!("{role}: base_url is required for {:?}", self.kind));
            } else if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
                problems.push(format!("{role}: base_url must be an http(s) URL"));
            }
            if self.model.is_empty() {
                problems.push(format!("{role}: model is required"));
            }
        }
        if !(self.timeout_secs > 0.0) {
            problems.push(format!("{role}: timeout_secs must be positive"));
        }
        if self.retry.max_attempts == 0 {
            problems.push(format!("{role}: retry.max_attempts must be at least 1"));
        }
        if let Some(rate) = self.rate_limit_per_sec {
            if !(rate > 0.0) {
                problems.push(format!("{role}: rate_limit_per_sec must be positive"));
            }
        }
        problems
    }

    pub fn build_chat(&self) -> Result<Arc<dyn ChatProvider>, ProviderError> {
        match self.kind {
            ProviderKind::Mock => Ok(Arc::new(MockChat::from_config(self))),
            ProviderKind::HttpChat => Ok(Arc::new(HttpChatProvider::new(self.clone())?)),
            ProviderKind::HttpEmbed => {
                Err(ProviderError::Malformed("an http-embed provider cannot serve chat requests".into()))
            }
        }
    }

    pub fn build_embedder(&self) -> Result<Arc<dyn EmbeddingProvider>, ProviderError> {
        match self.kind {
            ProviderKind::Mock => Ok(Arc::new(MockEmbedder::new(self.mock_seed))),
            ProviderKind::HttpEmbed => Ok(Arc::new(HttpEmbeddingProvider::new(self.clone())?)),
            ProviderKind::HttpChat => {
                Err(ProviderError::Malformed("an http-chat provider cannot serve embeddings".into()))
            }
        }
    }
}
