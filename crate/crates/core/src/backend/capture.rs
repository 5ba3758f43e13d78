use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, CompletionRequest, CompletionResponse, Usage};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureRecord {
    pub backend_id: String,
    pub label: String,
    /// Position among records sharing `label`.
    pub seq: u32,
    pub request: CompletionRequest,
    pub response: Option<String>,
    pub usage: Option<Usage>,
    pub error: Option<String>,
}

#[derive(Debug, Default)]
struct Inner {
    records: Vec<CaptureRecord>,
    per_label: HashMap<String, u32>,
}

/// Append-only log of backend exchanges, optionally mirrored to a
/// directory as one `<label>-<seq>.json` file per call.
#[derive(Debug, Clone, Default)]
pub struct CaptureLog {
    inner: Arc<Mutex<Inner>>,
    dir: Option<PathBuf>,
}

impl CaptureLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_dir(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self {
            inner: Arc::default(),
            dir: Some(dir),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn record(
        &self,
        backend_id: &str,
        request: &CompletionRequest,
        result: &Result<CompletionResponse, BackendError>,
    ) {
        let mut inner = self.inner.lock().expect("capture lock poisoned");
        let seq = {
            let counter = inner.per_label.entry(request.label.clone()).or_insert(0);
            let seq = *counter;
            *counter += 1;
            seq
        };
        let record = CaptureRecord {
            backend_id: backend_id.to_string(),
            label: request.label.clone(),
            seq,
            request: request.clone(),
            response: result.as_ref().ok().map(|r| r.text.clone()),
            usage: result.as_ref().ok().map(|r| r.usage),
            error: result.as_ref().err().map(|e| e.to_string()),
        };
        if let Some(dir) = &self.dir {
            let name = format!("{}-{seq}.json", sanitize(&request.label));
            let bytes = serde_json::to_vec_pretty(&record).expect("capture records serialize");
            if let Err(err) = std::fs::write(dir.join(&name), bytes) {
                tracing::warn!(file = %name, %err, "failed to write capture file");
            }
        }
        inner.records.push(record);
    }

    pub fn records(&self) -> Vec<CaptureRecord> {
        self.inner.lock().expect("capture lock poisoned").records.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("capture lock poisoned").records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes every record to `dir` as `<label>-<seq>.json`.
    pub fn persist(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for record in self.records() {
            let name = format!("{}-{}.json", sanitize(&record.label), record.seq);
            let bytes = serde_json::to_vec_pretty(&record).expect("capture records serialize");
            std::fs::write(dir.join(name), bytes)?;
        }
        Ok(())
    }

    /// Captured requests whose label starts with `prefix`.
    pub fn prompts_with_label(&self, prefix: &str) -> Vec<CaptureRecord> {
        self.records()
            .into_iter()
            .filter(|r| r.label.starts_with(prefix))
            .collect()
    }
}

fn sanitize(label: &str) -> String {
    let cleaned: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect();
    if cleaned.is_empty() {
        "unlabelled".into()
    } else {
        cleaned
    }
}

/// Tees every call through `inner` into a [`CaptureLog`].
#[derive(Debug)]
pub struct Capturing<B> {
    inner: B,
    log: CaptureLog,
}

impl<B: Backend> Capturing<B> {
    pub fn new(inner: B, log: CaptureLog) -> Self {
        Self { inner, log }
    }
}

impl<B: Backend> Backend for Capturing<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let result = self.inner.complete(request);
        self.log.record(self.inner.id(), request, &result);
        result
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        (**self).complete(request)
    }
}
