//! Blocking JSON-over-HTTP client with bounded exponential backoff, shared by
//! the remote NLU backend and the chat-completion client.

use std::sync::OnceLock;
use std::thread;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum HttpError {
    #[error("request to {url} timed out")]
    Timeout { url: String },
    #[error("{url} returned status {status}: {body}")]
    Status { url: String, status: u16, body: String },
    #[error("transport error for {url}: {message}")]
    Transport { url: String, message: String },
    #[error("malformed response from {url}: {message}")]
    Envelope { url: String, message: String },
    #[error("invalid endpoint configuration: {0}")]
    Config(String),
}

impl HttpError {
    fn is_transient(&self) -> bool {
        match self {
            HttpError::Timeout { .. } | HttpError::Transport { .. } => true,
            HttpError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_retries() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    250
}

/// Connection settings for a remote service. The API key itself is never
/// stored, only the name of the environment variable that holds it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Endpoint {
    pub base_url: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
}

impl Endpoint {
    pub fn new(base_url: impl Into<String>) -> Self {
        Endpoint {
            base_url: base_url.into(),
            timeout_ms: default_timeout_ms(),
            max_retries: default_retries(),
            backoff_base_ms: default_backoff_ms(),
            api_key_env: None,
        }
    }

    pub fn validate(&self) -> Result<(), HttpError> {
        if self.timeout_ms == 0 {
            return Err(HttpError::Config("timeout must be positive".into()));
        }
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(HttpError::Config(format!(
                "base_url must be http(s): {}",
                self.base_url
            )));
        }
        Ok(())
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.base_url.trim_end_matches('/'), path)
    }

    /// Delay before retry number `attempt` (0-based): base * 2^attempt,
    /// jittered into `[d/2, d]`.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let full = self.backoff_base_ms.saturating_mul(1u64 << attempt.min(16));
        let half = full / 2;
        let jitter = if half > 0 {
            rand::thread_rng().gen_range(0..=half)
        } else {
            0
        };
        Duration::from_millis(half + jitter)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub body: Value,
    pub attempts: u32,
}

fn client() -> &'static reqwest::blocking::Client {
    static CLIENT: OnceLock<reqwest::blocking::Client> = OnceLock::new();
    CLIENT.get_or_init(|| {
        reqwest::blocking::Client::builder()
            .build()
            .expect("http client builds")
    })
}

fn post_once(endpoint: &Endpoint, url: &str, body: &Value) -> Result<Value, HttpError> {
    let mut req = client()
        .post(url)
        .timeout(Duration::from_millis(endpoint.timeout_ms))
        .json(body);
    if let Some(var) = &endpoint.api_key_env {
        if let Ok(key) = std::env::var(var) {
            req = req.bearer_auth(key);
        }
    }
    let resp = req.send().map_err(|e| {
        if e.is_timeout() {
            HttpError::Timeout { url: url.to_string() }
        } else {
            HttpError::Transport {
                url: url.to_string(),
                message: e.to_string(),
            }
        }
    })?;
    let status = resp.status();
    let text = resp.text().map_err(|e| {
        if e.is_timeout() {
            HttpError::Timeout { url: url.to_string() }
        } else {
            HttpError::Transport {
                url: url.to_string(),
                message: e.to_string(),
            }
        }
    })?;
    if !status.is_success() {
        let mut body = text;
        body.truncate(512);
        return Err(HttpError::Status {
            url: url.to_string(),
            status: status.as_u16(),
            body,
        });
    }
    serde_json::from_str(&text).map_err(|e| HttpError::Envelope {
        url: url.to_string(),
        message: e.to_string(),
    })
}

/// POSTs `body` as JSON and parses a JSON reply, retrying transient failures
/// (timeouts, transport errors, 429 and 5xx) up to `max_retries` times.
pub fn post_json(endpoint: &Endpoint, path: &str, body: &Value) -> Result<Response, HttpError> {
    endpoint.validate()?;
    let url = endpoint.url(path);
    let mut attempt = 0;
    loop {
        match post_once(endpoint, &url, body) {
            Ok(body) => {
                return Ok(Response {
                    body,
                    attempts: attempt + 1,
                })
            }
            Err(e) if e.is_transient() && attempt < endpoint.max_retries => {
                let delay = endpoint.backoff(attempt);
                log::warn!(
                    "attempt {} to {} failed ({}); retrying in {} ms",
                    attempt + 1,
                    url,
                    e,
                    delay.as_millis()
                );
                thread::sleep(delay);
                attempt += 1;
            }
            Err(e) => {
                log::warn!("attempt {} to {} failed ({}); giving up", attempt + 1, url, e);
                return Err(e);
            }
        }
    }
}
