use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use reqwest::blocking::Client;
use serde_json::{json, Value};

use super::{
    payload_hash, with_retry, ChatProvider, ChatRequest, EmbeddingProvider, ProviderConfig,
    ProviderError,
};

/// Token bucket shared by every thread using one client.
pub struct TokenBucket {
    rate: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(rate_per_sec: f64) -> Self {
        let capacity = rate_per_sec.max(1.0);
        Self { rate: rate_per_sec, capacity, state: Mutex::new((capacity, Instant::now())) }
    }

    /// Blocks until a token is available.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut state = self.state.lock().unwrap();
                let now = Instant::now();
                let (tokens, last) = *state;
                let refilled = (tokens + now.duration_since(last).as_secs_f64() * self.rate).min(self.capacity);
                if refilled >= 1.0 {
                    *state = (refilled - 1.0, now);
                    return;
                }
                *state = (refilled, now);
                Duration::from_secs_f64((1.0 - refilled) / self.rate)
            };
            thread::sleep(wait);
        }
    }
}

fn default_chat_template() -> Value {
    json!({
        "model": "{{model}}",
        "temperature": "{{temperature}}",
        "messages": [
            {"role": "system", "content": "{{system}}"},
            {"role": "user", "content": "{{user}}"}
        ]
    })
}

fn default_embed_template() -> Value {
    json!({"model": "{{model}}", "input": "{{input}}", "dimensions": "{{dim}}"})
}

/// Replaces placeholders in every string of `template`. A string that is
/// exactly one placeholder takes the placeholder's JSON value (so numbers
/// stay numbers); otherwise substitution is textual.
pub(crate) fn render(template: &Value, vars: &[(&str, Value)]) -> Value {
    match template {
        Value::String(s) => {
            for (name, value) in vars {
                if s == &format!("{{{{{name}}}}}") {
                    return value.clone();
                }
            }
            let mut out = s.clone();
            for (name, value) in vars {
                let needle = format!("{{{{{name}}}}}");
                if out.contains(&needle) {
                    let text = match value {
                        Value::String(v) => v.clone(),
                        other => other.to_string(),
                    };
                    out = out.replace(&needle, &text);
                }
            }
            Value::String(out)
        }
        Value::Array(items) => Value::Array(items.iter().map(|v| render(v, vars)).collect()),
        Value::Object(map) => {
            Value::Object(map.iter().map(|(k, v)| (k.clone(), render(v, vars))).collect())
        }
        other => other.clone(),
    }
}

struct HttpCore {
    cfg: ProviderConfig,
    client: Client,
    limiter: Option<TokenBucket>,
}

impl HttpCore {
    fn new(cfg: ProviderConfig) -> Result<Self, ProviderError> {
        let client = Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let limiter = cfg.rate_limit_per_sec.map(TokenBucket::new);
        Ok(Self { cfg, client, limiter })
    }

    /// Reads the API key. Missing keys fail here, before any network call.
    fn auth_token(&self) -> Result<Option<String>, ProviderError> {
        match &self.cfg.auth_env {
            None => Ok(None),
            Some(var) => match std::env::var(var) {
                Ok(v) if !v.is_empty() => Ok(Some(v)),
                _ => Err(ProviderError::Auth(format!("environment variable {var} is not set"))),
            },
        }
    }

    fn post(&self, body: &Value, token: Option<&str>) -> Result<Value, ProviderError> {
        if let Some(limiter) = &self.limiter {
            limiter.acquire();
        }
        let mut req = self.client.post(&self.cfg.base_url).json(body);
        if let Some(token) = token {
            req = req.header(self.cfg.auth_header.as_str(), format!("{}{}", self.cfg.auth_prefix, token));
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                ProviderError::Timeout
            } else {
                ProviderError::Transport(e.to_string())
            }
        })?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| ProviderError::Transport(e.to_string()))?;
        match status {
            200..=299 => serde_json::from_str(&text).map_err(|e| ProviderError::Malformed(e.to_string())),
            401 | 403 => Err(ProviderError::Auth(format!("provider rejected credentials ({status})"))),
            429 => Err(ProviderError::RateLimited),
            _ => Err(ProviderError::Status { status, body: text.chars().take(200).collect() }),
        }
    }

    fn call(&self, body: Value) -> Result<Value, ProviderError> {
        let token = self.auth_token()?;
        with_retry(&self.cfg.retry, || self.post(&body, token.as_deref()))
    }

    fn pointer<'a>(&self, response: &'a Value, default: &str) -> Result<&'a Value, ProviderError> {
        let path = self.cfg.response_pointer.as_deref().unwrap_or(default);
        response
            .pointer(path)
            .ok_or_else(|| ProviderError::Malformed(format!("no value at {path}")))
    }
}

/// Chat completions over a JSON HTTP endpoint.
pub struct HttpChatProvider {
    core: HttpCore,
}

impl HttpChatProvider {
    pub fn new(cfg: ProviderConfig) -> Result<Self, ProviderError> {
        Ok(Self { core: HttpCore::new(cfg)? })
    }
}

impl ChatProvider for HttpChatProvider {
    fn chat(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let template = self.core.cfg.request_template.clone().unwrap_or_else(default_chat_template);
        let body = render(
            &template,
            &[
                ("model", json!(self.core.cfg.model)),
                ("system", json!(request.system)),
                ("user", json!(request.user)),
                ("temperature", json!(request.temperature)),
                ("seed", json!(request.seed)),
            ],
        );
        log::debug!("chat request payload={} model={}", request.payload_hash(), self.core.cfg.model);
        let response = self.core.call(body)?;
        let text = self
            .core
            .pointer(&response, "/choices/0/message/content")?
            .as_str()
            .ok_or_else(|| ProviderError::Malformed("completion is not a string".into()))?
            .to_string();
        log::debug!("chat response payload={}", payload_hash(&[&text]));
        Ok(text)
    }
}

/// Embeddings over a JSON HTTP endpoint.
pub struct HttpEmbeddingProvider {
    core: HttpCore,
}

impl HttpEmbeddingProvider {
    pub fn new(cfg: ProviderConfig) -> Result<Self, ProviderError> {
        Ok(Self { core: HttpCore::new(cfg)? })
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn embed_raw(&self, text: &str, dim: usize) -> Result<Vec<f64>, ProviderError> {
        let template = self.core.cfg.request_template.clone().unwrap_or_else(default_embed_template);
        let body = render(
            &template,
            &[("model", json!(self.core.cfg.model)), ("input", json!(text)), ("dim", json!(dim))],
        );
        log::debug!("embed request payload={}", payload_hash(&[text]));
        let response = self.core.call(body)?;
        self.core
            .pointer(&response, "/data/0/embedding")?
            .as_array()
            .ok_or_else(|| ProviderError::Malformed("embedding is not an array".into()))?
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| ProviderError::Malformed("non-numeric embedding".into())))
            .collect()
    }
}
