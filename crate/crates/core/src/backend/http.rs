use std::sync::OnceLock;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{Backend, BackendError, BackendSpec, CompletionRequest, CompletionResponse, RetryPolicy, Usage};

/// Client for OpenAI-compatible `POST {base_url}/chat/completions` endpoints.
#[derive(Debug)]
pub struct HttpBackend {
    spec: BackendSpec,
    retry: RetryPolicy,
    // Built on first use so construction is safe inside an async runtime.
    client: OnceLock<reqwest::blocking::Client>,
}

impl HttpBackend {
    pub fn new(spec: BackendSpec) -> Result<Self, BackendError> {
        if spec.endpoint.is_none() {
            return Err(BackendError::Config(format!(
                "backend `{}` has no endpoint configured",
                spec.rater_id
            )));
        }
        Ok(Self {
            spec,
            retry: RetryPolicy::default(),
            client: OnceLock::new(),
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn spec(&self) -> &BackendSpec {
        &self.spec
    }

    fn client(&self) -> &reqwest::blocking::Client {
        self.client.get_or_init(|| {
            let timeout = self.spec.endpoint.as_ref().map_or(120, |e| e.timeout_secs);
            reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(timeout))
                .build()
                .expect("HTTP client configuration is static")
        })
    }

    fn body(&self, request: &CompletionRequest) -> Value {
        let endpoint = self.spec.endpoint.as_ref().expect("checked in new");
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| json!({ "role": m.role.as_str(), "content": m.text }))
            .collect();
        json!({
            "model": endpoint.model,
            "messages": messages,
            "temperature": self.spec.sampling.temperature,
            "max_tokens": self.spec.sampling.max_output_tokens,
        })
    }

    fn attempt(&self, body: &Value, token: Option<&str>) -> Result<(Value, u64), BackendError> {
        let endpoint = self.spec.endpoint.as_ref().expect("checked in new");
        let url = format!("{}/chat/completions", endpoint.base_url.trim_end_matches('/'));
        let started = Instant::now();
        let mut call = self.client().post(&url).json(body);
        if let Some(token) = token {
            call = call.bearer_auth(token);
        }
        let response = call.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        let status = response.status();
        let text = response.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Status {
                status: status.as_u16(),
                body: text,
            });
        }
        let value: Value = serde_json::from_str(&text).map_err(|e| BackendError::Decode(e.to_string()))?;
        Ok((value, started.elapsed().as_millis() as u64))
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.spec.rater_id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let endpoint = self.spec.endpoint.as_ref().expect("checked in new");
        let token = match &endpoint.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| BackendError::MissingCredential(var.clone()))?),
            None => None,
        };
        let body = self.body(request);
        let (value, latency_ms) = self.retry.run(|_| self.attempt(&body, token.as_deref()))?;
        let text = value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::Decode("missing choices[0].message.content".into()))?
            .to_string();
        if text.trim().is_empty() {
            return Err(BackendError::EmptyResponse);
        }
        let units = |key: &str| value.pointer(&format!("/usage/{key}")).and_then(Value::as_u64).unwrap_or(0);
        Ok(CompletionResponse {
            text,
            usage: Usage {
                input_units: units("prompt_tokens"),
                output_units: units("completion_tokens"),
            },
            latency_ms,
        })
    }
}
