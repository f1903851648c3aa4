//! Chat-completions client for an OpenAI-compatible vision endpoint.
//!
//! Request body:
//!
//! ```json
//! {"model": "...", "max_tokens": 200, "messages": [{"role": "user", "content": [
//!   {"type": "text", "text": "<prompt>"},
//!   {"type": "image_url", "image_url": {"url": "data:image/png;base64,<png>"}}]}]}
//! ```
//!
//! The caption is read from `choices[0].message.content`.

use std::thread;
use std::time::{Duration, Instant};

use base64::Engine;
use serde_json::{json, Value};
use thiserror::Error;

/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "TLV_VLM_API_KEY";

#[derive(Debug, Error)]
pub enum VlmError {
    #[error("request failed: {0}")]
    Transport(String),
    #[error("authentication rejected (HTTP {0})")]
    Auth(u16),
    #[error("endpoint returned HTTP {code}: {body}")]
    Status { code: u16, body: String },
    #[error("endpoint refused the request: {0}")]
    Refused(String),
    #[error("endpoint returned an empty caption")]
    EmptyResponse,
    #[error("unexpected response shape: {0}")]
    Malformed(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: usize, last: Box<VlmError> },
    #[error("invalid client configuration: {0}")]
    Config(String),
}

impl VlmError {
    /// Transient failures worth another attempt.
    pub fn retryable(&self) -> bool {
        match self {
            VlmError::Transport(_) | VlmError::EmptyResponse | VlmError::Malformed(_) => true,
            VlmError::Status { code, .. } => *code == 429 || *code >= 500,
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, VlmError>;

#[derive(Debug, Clone, PartialEq)]
pub struct VlmConfig {
    /// Full URL of the chat-completions route.
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub max_attempts: usize,
    /// Wait before the second attempt; doubles for each further attempt.
    pub initial_backoff: Duration,
    pub requests_per_minute: u32,
    pub max_tokens: u32,
    pub timeout: Duration,
}

impl VlmConfig {
    pub fn new(endpoint: &str, model: &str) -> Self {
        Self {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            max_attempts: 3,
            initial_backoff: Duration::from_secs(1),
            requests_per_minute: 20,
            max_tokens: 200,
            timeout: Duration::from_secs(60),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://")) {
            return Err(VlmError::Config(format!(
                "endpoint `{}` is not an http(s) URL",
                self.endpoint
            )));
        }
        if self.model.trim().is_empty() {
            return Err(VlmError::Config("model name is empty".into()));
        }
        if self.max_attempts == 0 {
            return Err(VlmError::Config("max_attempts must be positive".into()));
        }
        if self.requests_per_minute == 0 {
            return Err(VlmError::Config("requests_per_minute must be positive".into()));
        }
        Ok(())
    }

    /// Delay after failed attempt `attempt` (0-based).
    pub fn backoff(&self, attempt: usize) -> Duration {
        self.initial_backoff * 2u32.saturating_pow(attempt as u32)
    }
}

/// Spaces request starts at least `60 / rpm` seconds apart.
#[derive(Debug, Clone)]
pub struct RateLimiter {
    interval: Duration,
    next: Option<Instant>,
}

impl RateLimiter {
    pub fn per_minute(rpm: u32) -> Self {
        Self {
            interval: Duration::from_secs(60) / rpm.max(1),
            next: None,
        }
    }

    pub fn interval(&self) -> Duration {
        self.interval
    }

    /// Books the next slot and returns how long to wait for it.
    pub fn reserve(&mut self, now: Instant) -> Duration {
        let start = match self.next {
            Some(n) if n > now => n,
            _ => now,
        };
        self.next = Some(start + self.interval);
        start - now
    }

    pub fn acquire(&mut self) {
        let wait = self.reserve(Instant::now());
        if !wait.is_zero() {
            thread::sleep(wait);
        }
    }
}

pub fn request_body(model: &str, prompt: &str, png: &[u8], max_tokens: u32) -> Value {
    let data = base64::engine::general_purpose::STANDARD.encode(png);
    json!({
        "model": model,
        "max_tokens": max_tokens,
        "messages": [{
            "role": "user",
            "content": [
                { "type": "text", "text": prompt },
                { "type": "image_url", "image_url": { "url": format!("data:image/png;base64,{data}") } }
            ]
        }]
    })
}

/// Extracts `choices[0].message.content`.
pub fn response_text(body: &Value) -> Result<String> {
    let message = body
        .pointer("/choices/0/message")
        .ok_or_else(|| VlmError::Malformed("missing choices[0].message".into()))?;
    if let Some(r) = message.get("refusal").and_then(Value::as_str) {
        if !r.trim().is_empty() {
            return Err(VlmError::Refused(r.to_string()));
        }
    }
    let text = message
        .get("content")
        .and_then(Value::as_str)
        .ok_or_else(|| VlmError::Malformed("choices[0].message.content is not a string".into()))?;
    if text.trim().is_empty() {
        return Err(VlmError::EmptyResponse);
    }
    Ok(text.to_string())
}

pub struct ChatClient {
    config: VlmConfig,
    agent: ureq::Agent,
    limiter: RateLimiter,
}

impl ChatClient {
    pub fn new(config: VlmConfig) -> Result<Self> {
        config.validate()?;
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        let limiter = RateLimiter::per_minute(config.requests_per_minute);
        Ok(Self {
            config,
            agent,
            limiter,
        })
    }

    pub fn config(&self) -> &VlmConfig {
        &self.config
    }

    fn attempt(&mut self, body: &Value) -> Result<String> {
        self.limiter.acquire();
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| VlmError::Transport(e.to_string()))?;
        let code = resp.status().as_u16();
        if code == 401 || code == 403 {
            return Err(VlmError::Auth(code));
        }
        if !(200..300).contains(&code) {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(VlmError::Status {
                code,
                body: text.chars().take(500).collect(),
            });
        }
        let value: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| VlmError::Malformed(e.to_string()))?;
        response_text(&value)
    }

    /// Sends one prompt with a PNG image, retrying transient failures with
    /// exponential backoff.
    pub fn complete(&mut self, prompt: &str, png: &[u8]) -> Result<String> {
        let body = request_body(&self.config.model, prompt, png, self.config.max_tokens);
        let attempts = self.config.max_attempts;
        let mut last = None;
        for attempt in 0..attempts {
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(e) if e.retryable() => {
                    log::warn!("attempt {} of {attempts} failed: {e}", attempt + 1);
                    if attempt + 1 < attempts {
                        thread::sleep(self.config.backoff(attempt));
                    }
                    last = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        Err(VlmError::Exhausted {
            attempts,
            last: Box::new(last.expect("at least one attempt")),
        })
    }
}
