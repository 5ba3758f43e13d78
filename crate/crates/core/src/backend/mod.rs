//! Text-generation backends.
//!
//! [`Backend`] is the one call every component makes. Implementations:
//! [`MockBackend`] (scripted, deterministic) and [`HttpBackend`]
//! (OpenAI-compatible chat completions). [`Capturing`] wraps either and
//! tees every exchange to a [`CaptureLog`].

mod capture;
mod http;
mod ledger;
mod mock;

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{ModelError, Validate};

pub use capture::{CaptureLog, CaptureRecord, Capturing};
pub use http::HttpBackend;
pub use ledger::{usage_ledger, CostSummary, LedgerError, UnitPrices, UsageEntry};
pub use mock::{MockBackend, MockRule, MockScript, MockScriptSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageRole {
    System,
    User,
    Assistant,
}

impl MessageRole {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageRole::System => "system",
            MessageRole::User => "user",
            MessageRole::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: MessageRole,
    pub text: String,
}

impl Message {
    pub fn system(text: impl Into<String>) -> Self {
        Self {
            role: MessageRole::System,
            text: text.into(),
        }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self {
            role: MessageRole::User,
            text: text.into(),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: MessageRole::Assistant,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionRequest {
    /// Caller-side tag used for capture file names; never sent to a provider.
    #[serde(default)]
    pub label: String,
    pub messages: Vec<Message>,
}

impl CompletionRequest {
    pub fn new(label: impl Into<String>, messages: Vec<Message>) -> Self {
        Self {
            label: label.into(),
            messages,
        }
    }

    /// The prompt as one string: `role: text` blocks separated by blank lines.
    pub fn prompt_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| format!("{}: {}", m.role.as_str(), m.text))
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    /// Hex SHA-256 of [`prompt_text`](Self::prompt_text). Mock scripts key on this.
    pub fn prompt_hash(&self) -> String {
        hex::encode(Sha256::digest(self.prompt_text().as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_units: u64,
    pub output_units: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub usage: Usage,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("HTTP status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("credential environment variable `{0}` is not set")]
    MissingCredential(String),
    #[error("no mock script entry for prompt {hash} (ordinal {ordinal})")]
    MockMiss { hash: String, ordinal: u32 },
    #[error("undecodable response: {0}")]
    Decode(String),
    #[error("backend returned empty text")]
    EmptyResponse,
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<BackendError> },
}

impl BackendError {
    /// Transport failures, timeouts and 5xx responses are worth retrying.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) | BackendError::Timeout => true,
            BackendError::Status { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

pub trait Backend: Send + Sync {
    /// Identity used in capture logs and usage accounting.
    fn id(&self) -> &str;

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError>;
}

impl fmt::Debug for dyn Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Backend({})", self.id())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay: Duration::ZERO,
        }
    }

    /// Runs `call` until it succeeds, fails terminally, or attempts run out.
    /// Delay before attempt `n + 1` is `base_delay * 2^(n - 1)`.
    pub fn run<T>(&self, mut call: impl FnMut(u32) -> Result<T, BackendError>) -> Result<T, BackendError> {
        let attempts = self.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            match call(attempt) {
                Ok(value) => return Ok(value),
                Err(err) if !err.is_retryable() => return Err(err),
                Err(err) if attempt >= attempts => {
                    return Err(BackendError::Exhausted {
                        attempts,
                        last: Box::new(err),
                    })
                }
                Err(err) => {
                    tracing::debug!(attempt, %err, "retrying backend call");
                    let delay = self.base_delay.saturating_mul(1 << (attempt - 1).min(16));
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                    attempt += 1;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoint {
    /// Base URL of an OpenAI-compatible API, e.g. `https://api.example.com/v1`.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    120
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sampling {
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output")]
    pub max_output_tokens: u32,
}

fn default_max_output() -> u32 {
    4096
}

impl Default for Sampling {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_output_tokens: default_max_output(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    pub rater_id: String,
    pub family_label: String,
    #[serde(default)]
    pub endpoint: Option<Endpoint>,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default)]
    pub is_chair: bool,
    #[serde(default)]
    pub prices: Option<UnitPrices>,
}

/// Contents of `backends.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    pub council: Vec<BackendSpec>,
    #[serde(default)]
    pub examiner: Option<BackendSpec>,
}

/// A mock from `mocks` keyed by the spec's rater id when a script set is
/// given, otherwise an HTTP backend for the spec's endpoint.
pub fn instantiate(spec: &BackendSpec, mocks: Option<&MockScriptSet>) -> Result<Arc<dyn Backend>, BackendError> {
    match mocks {
        Some(set) => {
            let script = set.scripts.get(&spec.rater_id).cloned().ok_or_else(|| {
                BackendError::Config(format!("mock script has no entry for `{}`", spec.rater_id))
            })?;
            Ok(Arc::new(MockBackend::new(spec.rater_id.clone(), script)))
        }
        None => Ok(Arc::new(HttpBackend::new(spec.clone())?)),
    }
}

impl BackendsConfig {
    pub fn chair(&self) -> Option<&BackendSpec> {
        self.council.iter().find(|s| s.is_chair)
    }
}

impl Validate for BackendsConfig {
    fn validate(&self) -> Result<(), ModelError> {
        if self.council.len() < 3 {
            return Err(ModelError::schema("council", "a council needs at least three backends"));
        }
        let mut families = BTreeSet::new();
        let mut raters = BTreeSet::new();
        for (i, spec) in self.council.iter().enumerate() {
            if spec.rater_id.trim().is_empty() {
                return Err(ModelError::schema(format!("council[{i}].rater_id"), "must be non-empty"));
            }
            if !raters.insert(spec.rater_id.as_str()) {
                return Err(ModelError::schema(format!("council[{i}].rater_id"), "duplicate rater id"));
            }
            if !families.insert(spec.family_label.as_str()) {
                return Err(ModelError::schema(
                    format!("council[{i}].family_label"),
                    "council members must come from distinct model families",
                ));
            }
        }
        let chairs = self.council.iter().filter(|s| s.is_chair).count();
        if chairs != 1 {
            return Err(ModelError::schema(
                "council",
                format!("exactly one backend must be the chair, found {chairs}"),
            ));
        }
        Ok(())
    }
}

/// Whitespace word count; the unit used for mock usage accounting.
pub(crate) fn word_units(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    fn spec(id: &str, family: &str, chair: bool) -> BackendSpec {
        BackendSpec {
            rater_id: id.into(),
            family_label: family.into(),
            endpoint: None,
            sampling: Sampling::default(),
            is_chair: chair,
            prices: None,
        }
    }

    #[test]
    fn council_config_rules() {
        let ok = BackendsConfig {
            council: vec![spec("a", "fa", true), spec("b", "fb", false), spec("c", "fc", false)],
            examiner: None,
        };
        ok.validate().unwrap();
        assert_eq!(ok.chair().unwrap().rater_id, "a");

        let mut same_family = ok.clone();
        same_family.council[2].family_label = "fa".into();
        assert_eq!(same_family.validate().unwrap_err().field(), Some("council[2].family_label"));

        let mut two_chairs = ok.clone();
        two_chairs.council[1].is_chair = true;
        assert!(two_chairs.validate().is_err());

        let mut small = ok;
        small.council.pop();
        assert!(small.validate().is_err());
    }

    #[test]
    fn retry_only_retryable_errors() {
        let calls = Cell::new(0);
        let result: Result<(), _> = RetryPolicy::immediate(3).run(|_| {
            calls.set(calls.get() + 1);
            Err(BackendError::Status { status: 503, body: String::new() })
        });
        assert_eq!(calls.get(), 3);
        assert!(matches!(result, Err(BackendError::Exhausted { attempts: 3, .. })));

        calls.set(0);
        let result: Result<(), _> = RetryPolicy::immediate(3).run(|_| {
            calls.set(calls.get() + 1);
            Err(BackendError::Status { status: 401, body: String::new() })
        });
        assert_eq!(calls.get(), 1);
        assert!(matches!(result, Err(BackendError::Status { status: 401, .. })));

        calls.set(0);
        let result = RetryPolicy::immediate(3).run(|attempt| {
            calls.set(calls.get() + 1);
            if attempt < 2 {
                Err(BackendError::Timeout)
            } else {
                Ok(attempt)
            }
        });
        assert_eq!(result, Ok(2));
    }

    #[test]
    fn prompt_hash_depends_on_roles_and_text() {
        let a = CompletionRequest::new("x", vec![Message::user("hi")]);
        let b = CompletionRequest::new("y", vec![Message::user("hi")]);
        let c = CompletionRequest::new("x", vec![Message::system("hi")]);
        assert_eq!(a.prompt_hash(), b.prompt_hash());
        assert_ne!(a.prompt_hash(), c.prompt_hash());
        assert_eq!(a.prompt_hash().len(), 64);
    }
}
