//! LLM backends. Every call is a single stateless request: nothing is
//! carried from one prompt to the next.

use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::prompt::parse_prompt_items;
use crate::labels::{naive_ensemble, PseudoLabels, MOS_RANGE};

pub const ENV_API_KEY: &str = "GATHERMOS_API_KEY";
pub const ENV_ENDPOINT: &str = "GATHERMOS_ENDPOINT";
pub const ENV_MODEL: &str = "GATHERMOS_MODEL";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("authentication rejected (HTTP {0})")]
    AuthError(u16),
    #[error("rate limited (HTTP 429)")]
    RateLimited,
    #[error("request timed out")]
    Timeout,
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed server reply: {0}")]
    MalformedServerReply(String),
    #[error("mock backend could not read the prompt: {0}")]
    UnparsablePrompt(String),
    #[error("backend misconfigured: {0}")]
    Config(String),
}

impl BackendError {
    /// Errors that no retry can fix.
    pub fn is_fatal(&self) -> bool {
        matches!(self, BackendError::AuthError(_) | BackendError::Config(_))
    }

    /// Failures of the transport itself, as opposed to a bad answer.
    pub fn is_transport(&self) -> bool {
        matches!(
            self,
            BackendError::RateLimited
                | BackendError::Timeout
                | BackendError::Unreachable(_)
                | BackendError::Http { .. }
        )
    }
}

/// Maps one prompt to one response text.
pub trait Backend: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, BackendError>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        (**self).complete(prompt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Http,
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mock" => Ok(BackendKind::Mock),
            "http" => Ok(BackendKind::Http),
            other => Err(format!("unknown backend {other:?} (expected mock or http)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Falls back to `GATHERMOS_ENDPOINT`.
    pub endpoint_url: Option<String>,
    /// Falls back to `GATHERMOS_MODEL`.
    pub model_name: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub batch_size: usize,
    pub max_retries: u32,
    pub timeout_s: f64,
    pub backoff_base_s: f64,
    pub max_in_flight: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint_url: None,
            model_name: None,
            api_key_env: ENV_API_KEY.to_string(),
            batch_size: 10,
            max_retries: 2,
            timeout_s: 120.0,
            backoff_base_s: 2.0,
            max_in_flight: 2,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.batch_size == 0 {
            return Err(BackendError::Config("batch_size must be at least 1".into()));
        }
        if self.max_in_flight == 0 {
            return Err(BackendError::Config(
                "max_in_flight must be at least 1".into(),
            ));
        }
        if !(self.timeout_s > 0.0) || !(self.backoff_base_s >= 0.0) {
            return Err(BackendError::Config(
                "timeout_s must be positive and backoff_base_s non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Delay before retry number `attempt` (1-based): `base * 2^(attempt-1)`.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 2f64.powi(attempt.saturating_sub(1) as i32);
        Duration::from_secs_f64(self.backoff_base_s * factor)
    }
}

/// Deterministic offline stand-in for the LLM.
///
/// Scores each utterance as the naive ensemble of its pseudo-labels minus
/// twice its clipping ratio, clamped to `[1, 5]`.
#[derive(Debug, Default)]
pub struct MockBackend;

impl MockBackend {
    pub fn score(pseudo: &PseudoLabels, clipping_ratio: f64) -> f64 {
        (naive_ensemble(pseudo) - 2.0 * clipping_ratio).clamp(MOS_RANGE.0, MOS_RANGE.1)
    }
}

impl Backend for MockBackend {
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        let items = parse_prompt_items(prompt).map_err(BackendError::UnparsablePrompt)?;
        let mut out = Vec::with_capacity(items.len());
        for item in items {
            let pseudo = PseudoLabels::new(item.dnsmos, item.vqscore)
                .map_err(|e| BackendError::UnparsablePrompt(e.to_string()))?;
            let mos = Self::score(&pseudo, item.clipping_ratio);
            let clipping = if item.clipping_ratio > 0.0 {
                "yes"
            } else {
                "no"
            };
            out.push(json!({
                "utt_id": item.utt_id,
                "mos": mos,
                "attributes": { "clipping": clipping },
            }));
        }
        Ok(Value::Array(out).to_string())
    }
}

/// Chat-completion style HTTP client.
///
/// Sends `{model, messages: [{role: "user", content}]}` and returns the text
/// of the first choice's message. 429 and 5xx replies, timeouts and
/// connection failures are retried with exponential backoff; 401/403 are not.
pub struct HttpBackend {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    max_retries: u32,
    cfg: BackendConfig,
    backoffs: AtomicUsize,
}

impl HttpBackend {
    pub fn from_config(cfg: &BackendConfig) -> Result<Self, BackendError> {
        cfg.validate()?;
        let endpoint = cfg
            .endpoint_url
            .clone()
            .or_else(|| std::env::var(ENV_ENDPOINT).ok())
            .ok_or_else(|| {
                BackendError::Config(format!("no endpoint_url given and {ENV_ENDPOINT} unset"))
            })?;
        let model = cfg
            .model_name
            .clone()
            .or_else(|| std::env::var(ENV_MODEL).ok())
            .ok_or_else(|| {
                BackendError::Config(format!("no model_name given and {ENV_MODEL} unset"))
            })?;
        let api_key = std::env::var(&cfg.api_key_env).ok();
        if api_key.is_none() {
            return Err(BackendError::Config(format!(
                "API key variable {} is unset",
                cfg.api_key_env
            )));
        }
        Ok(Self::new(endpoint, model, api_key, cfg))
    }

    /// Builds a client without consulting the environment.
    pub fn new(
        endpoint: String,
        model: String,
        api_key: Option<String>,
        cfg: &BackendConfig,
    ) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_s)))
            .build()
            .into();
        Self {
            agent,
            endpoint,
            model,
            api_key,
            max_retries: cfg.max_retries,
            cfg: cfg.clone(),
            backoffs: AtomicUsize::new(0),
        }
    }

    /// Number of backoff sleeps taken so far.
    pub fn backoffs_recorded(&self) -> usize {
        self.backoffs.load(Ordering::SeqCst)
    }

    fn attempt(&self, prompt: &str) -> Result<String, BackendError> {
        let body = json!({
            "model": self.model,
            "messages": [{ "role": "user", "content": prompt }],
        });
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(map_transport_error)?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(map_transport_error)?;
        match status {
            200..=299 => extract_message(&text),
            401 | 403 => Err(BackendError::AuthError(status)),
            429 => Err(BackendError::RateLimited),
            _ => Err(BackendError::Http { status, body: text }),
        }
    }
}

fn map_transport_error(e: ureq::Error) -> BackendError {
    match e {
        ureq::Error::Timeout(_) => BackendError::Timeout,
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => BackendError::Timeout,
        other => BackendError::Unreachable(other.to_string()),
    }
}

fn retryable(e: &BackendError) -> bool {
    match e {
        BackendError::RateLimited | BackendError::Timeout | BackendError::Unreachable(_) => true,
        BackendError::Http { status, .. } => *status >= 500,
        _ => false,
    }
}

/// Pulls `choices[0].message.content` out of a chat-completion reply.
pub fn extract_message(body: &str) -> Result<String, BackendError> {
    let v: Value = serde_json::from_str(body)
        .map_err(|e| BackendError::MalformedServerReply(format!("not JSON: {e}")))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| {
            BackendError::MalformedServerReply("missing choices[0].message.content".into())
        })
}

impl Backend for HttpBackend {
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        let mut attempt = 0;
        loop {
            match self.attempt(prompt) {
                Err(e) if retryable(&e) && attempt < self.max_retries => {
                    attempt += 1;
                    let delay = self.cfg.backoff(attempt);
                    log::warn!("{e}; retrying in {delay:?} (attempt {attempt})");
                    self.backoffs.fetch_add(1, Ordering::SeqCst);
                    std::thread::sleep(delay);
                }
                other => return other,
            }
        }
    }
}
