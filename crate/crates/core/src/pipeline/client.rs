use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::config::{AgentConfig, AgentRole, TranscriptMode};
use super::PipelineError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("HTTP status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("network error: {0}")]
    Network(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("{0}")]
    Other(String),
}

impl TransportError {
    /// Whether another attempt might succeed.
    pub fn retriable(&self) -> bool {
        match self {
            TransportError::Status { status, .. } => *status == 429 || *status >= 500,
            TransportError::Timeout | TransportError::Network(_) => true,
            TransportError::Malformed(_) | TransportError::Other(_) => false,
        }
    }
}

/// Sends one chat-completion request body and returns the raw response body.
pub trait ChatTransport: Send + Sync {
    fn send(
        &self,
        endpoint: &str,
        token: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<Value, TransportError>;
}

/// Blocking HTTP transport for OpenAI-compatible `/chat/completions` endpoints.
#[derive(Debug, Default)]
pub struct HttpTransport;

impl ChatTransport for HttpTransport {
    fn send(
        &self,
        endpoint: &str,
        token: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<Value, TransportError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut req = agent.post(endpoint).header("Content-Type", "application/json");
        if let Some(token) = token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req.send_json(body).map_err(map_ureq)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(map_ureq)?;
        if !(200..300).contains(&status) {
            let mut body = text;
            body.truncate(500);
            return Err(TransportError::Status { status, body });
        }
        serde_json::from_str(&text).map_err(|e| TransportError::Malformed(e.to_string()))
    }
}

fn map_ureq(err: ureq::Error) -> TransportError {
    match err {
        ureq::Error::Timeout(_) => TransportError::Timeout,
        ureq::Error::StatusCode(status) => TransportError::Status {
            status,
            body: String::new(),
        },
        ureq::Error::Io(e) => TransportError::Network(e.to_string()),
        ureq::Error::ConnectionFailed | ureq::Error::HostNotFound => {
            TransportError::Network(err.to_string())
        }
        other => TransportError::Other(other.to_string()),
    }
}

/// Pulls `choices[0].message.content` out of a completion response.
pub fn completion_text(response: &Value) -> Option<String> {
    let content = response.pointer("/choices/0/message/content")?;
    match content {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => Some(
            parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join(""),
        ),
        _ => None,
    }
}

/// Evenly spaced request slots: at most `rate` starts per second.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(rate: f64) -> Self {
        RateLimiter {
            interval: Duration::from_secs_f64(1.0 / rate),
            next: Mutex::new(None),
        }
    }

    /// Blocks until the caller's slot arrives.
    pub fn acquire(&self) {
        let slot = {
            let mut next = self.next.lock().unwrap_or_else(|e| e.into_inner());
            let now = Instant::now();
            let slot = match *next {
                Some(t) if t > now => t,
                _ => now,
            };
            *next = Some(slot + self.interval);
            slot
        };
        let now = Instant::now();
        if slot > now {
            thread::sleep(slot - now);
        }
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub struct Semaphore {
    free: Mutex<usize>,
    cond: Condvar,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Semaphore {
            free: Mutex::new(permits),
            cond: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cond.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

pub struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cond.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub endpoint: String,
    pub request: Value,
    pub response: Value,
}

/// Content-addressed store of raw exchanges, one `<sha256>.json` per request.
#[derive(Debug, Clone)]
pub struct TranscriptStore {
    dir: PathBuf,
}

impl TranscriptStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        TranscriptStore { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(endpoint: &str, request: &Value) -> String {
        let mut hasher = Sha256::new();
        hasher.update(endpoint.as_bytes());
        hasher.update([0u8]);
        hasher.update(request.to_string().as_bytes());
        hex::encode(hasher.finalize())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn load(&self, key: &str) -> Result<Option<Transcript>, PipelineError> {
        let path = self.path(key);
        match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map(Some)
                .map_err(|e| PipelineError::Transcript(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(PipelineError::Io { path, source: e }),
        }
    }

    pub fn save(&self, key: &str, transcript: &Transcript) -> Result<(), PipelineError> {
        let io = |path: &Path, e| PipelineError::Io {
            path: path.to_path_buf(),
            source: e,
        };
        std::fs::create_dir_all(&self.dir).map_err(|e| io(&self.dir, e))?;
        let path = self.path(key);
        let tmp = self.dir.join(format!("{key}.json.tmp"));
        let mut text = serde_json::to_string_pretty(transcript).expect("transcript serializes");
        text.push('\n');
        std::fs::write(&tmp, text).map_err(|e| io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| io(&path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "lowercase")]
pub enum Message {
    System { content: String },
    User { content: Value },
    Assistant { content: String },
}

impl Message {
    pub fn system(text: impl Into<String>) -> Self {
        Message::System {
            content: text.into(),
        }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Message::User {
            content: Value::String(text.into()),
        }
    }

    /// User turn carrying text plus an image URL (http(s) or `data:` URL).
    pub fn user_with_image(text: impl Into<String>, image_url: impl Into<String>) -> Self {
        Message::User {
            content: json!([
                {"type": "text", "text": text.into()},
                {"type": "image_url", "image_url": {"url": image_url.into()}},
            ]),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Message::Assistant {
            content: text.into(),
        }
    }
}

/// Reply text plus the transcript key it is stored under.
#[derive(Debug, Clone, PartialEq)]
pub struct Exchange {
    pub text: String,
    pub key: String,
}

/// One configured agent bound to its transport, limiter and transcript store.
pub struct AgentClient<'a> {
    pub config: &'a AgentConfig,
    pub transport: &'a dyn ChatTransport,
    pub limiter: &'a RateLimiter,
    pub slots: &'a Semaphore,
    pub store: Option<&'a TranscriptStore>,
    pub mode: TranscriptMode,
}

impl AgentClient<'_> {
    pub fn role(&self) -> AgentRole {
        self.config.role
    }

    pub fn request_body(&self, messages: &[Message]) -> Value {
        json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": 0,
        })
    }

    /// Sends `messages`, honouring transcripts, rate limit, concurrency bound and retries.
    pub fn chat(&self, messages: &[Message]) -> Result<Exchange, PipelineError> {
        let body = self.request_body(messages);
        let key = TranscriptStore::key(&self.config.endpoint, &body);
        let stored = match (self.mode, self.store) {
            (TranscriptMode::Live, _) | (_, None) => None,
            (_, Some(store)) => store.load(&key)?,
        };
        let response = match stored {
            Some(t) => t.response,
            None if self.mode == TranscriptMode::Replay => {
                return Err(PipelineError::MissingTranscript {
                    role: self.role(),
                    key,
                })
            }
            None => {
                let response = self.send_with_retries(&body)?;
                if let (TranscriptMode::Record, Some(store)) = (self.mode, self.store) {
                    let transcript = Transcript {
                        endpoint: self.config.endpoint.clone(),
                        request: body,
                        response: response.clone(),
                    };
                    store.save(&key, &transcript)?;
                }
                response
            }
        };
        let text = completion_text(&response).ok_or_else(|| PipelineError::Endpoint {
            role: self.role(),
            attempts: 1,
            source: TransportError::Malformed("no choices[0].message.content".into()),
        })?;
        if text.trim().is_empty() {
            return Err(PipelineError::EmptyResponse { role: self.role() });
        }
        Ok(Exchange { text, key })
    }

    fn send_with_retries(&self, body: &Value) -> Result<Value, PipelineError> {
        let token = match &self.config.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                PipelineError::Config(format!(
                    "{} agent: environment variable `{var}` is not set",
                    self.role()
                ))
            })?),
            None => None,
        };
        let timeout = Duration::from_secs(self.config.timeout_secs);
        let attempts = self.config.max_retries + 1;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = {
                let _permit = self.slots.acquire();
                self.limiter.acquire();
                self.transport
                    .send(&self.config.endpoint, token.as_deref(), body, timeout)
            };
            match result {
                Ok(v) => return Ok(v),
                Err(e) if e.retriable() && attempt < attempts => {
                    let factor = 1u64 << (attempt - 1).min(10);
                    thread::sleep(Duration::from_millis(self.config.backoff_ms.saturating_mul(factor)));
                }
                Err(source) => {
                    return Err(PipelineError::Endpoint {
                        role: self.role(),
                        attempts: attempt,
                        source,
                    })
                }
            }
        }
    }
}
