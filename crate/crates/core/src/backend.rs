//! Plumbing shared by the remote text-generation and embedding backends:
//! retry with bounded exponential backoff and a small JSON-over-HTTP client.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Result, TupError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendError {
    /// Worth retrying (transport failure, 5xx, rate limit).
    Transient(String),
    Fatal(String),
}

impl BackendError {
    pub fn message(&self) -> &str {
        match self {
            BackendError::Transient(m) | BackendError::Fatal(m) => m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub attempts: usize,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(attempts: usize) -> Self {
        RetryPolicy {
            attempts,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    pub fn delay_before(&self, attempt: usize) -> Duration {
        let factor = 1u64 << (attempt.saturating_sub(1)).min(20);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

/// Runs `call` until it succeeds, fails fatally, or exhausts the attempts.
pub fn call_with_retry<T>(
    backend: &str,
    policy: &RetryPolicy,
    mut call: impl FnMut() -> std::result::Result<T, BackendError>,
) -> Result<T> {
    let attempts = policy.attempts.max(1);
    let mut last = String::new();
    for attempt in 1..=attempts {
        if attempt > 1 {
            std::thread::sleep(policy.delay_before(attempt - 1));
        }
        match call() {
            Ok(v) => return Ok(v),
            Err(BackendError::Fatal(message)) => {
                return Err(TupError::Backend {
                    backend: backend.to_owned(),
                    attempts: attempt,
                    message,
                })
            }
            Err(BackendError::Transient(message)) => {
                log::warn!("{backend}: attempt {attempt}/{attempts} failed: {message}");
                last = message;
            }
        }
    }
    Err(TupError::Backend {
        backend: backend.to_owned(),
        attempts,
        message: last,
    })
}

pub fn api_key_from_env(var: &str) -> Result<String> {
    match std::env::var(var) {
        Ok(v) if !v.trim().is_empty() => Ok(v),
        _ => Err(TupError::Config(format!("environment variable {var} is not set"))),
    }
}

/// Connection settings of a remote backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteSettings {
    /// Base URL of an OpenAI-compatible API, e.g. `https://api.openai.com/v1`.
    pub base_url: String,
    pub model: String,
    pub timeout_secs: u64,
}

impl Default for RemoteSettings {
    fn default() -> Self {
        RemoteSettings {
            base_url: "https://api.openai.com/v1".into(),
            model: String::new(),
            timeout_secs: 60,
        }
    }
}

#[derive(Debug, Clone)]
pub struct JsonClient {
    agent: ureq::Agent,
    api_key: String,
}

impl JsonClient {
    pub fn new(api_key: String, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        JsonClient { agent, api_key }
    }

    pub fn post(&self, url: &str, body: &Value) -> std::result::Result<Value, BackendError> {
        let payload = body.to_string();
        let mut resp = self
            .agent
            .post(url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .header("Content-Type", "application/json")
            .send(payload.as_bytes())
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        match status {
            200..=299 => serde_json::from_str(&text).map_err(|e| BackendError::Fatal(format!("bad response body: {e}"))),
            408 | 429 | 500..=599 => Err(BackendError::Transient(format!("HTTP {status}: {text}"))),
            _ => Err(BackendError::Fatal(format!("HTTP {status}: {text}"))),
        }
    }
}
