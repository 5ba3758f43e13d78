//! Filesystem store and the human audit queue.
//!
//! Layout under the data root:
//!
//! ```text
//! <session_id>/transcript.json
//! <session_id>/council.json
//! <session_id>/captures/
//! audit/queue.json
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::model::{
    from_canonical_json, to_canonical_json, CouncilResult, Flag, ModelError, Transcript, Validate, SCALE_MAX,
    TOTAL_MAX,
};

pub const TRANSCRIPT_FILE: &str = "transcript.json";
pub const COUNCIL_FILE: &str = "council.json";
pub const CAPTURES_DIR: &str = "captures";
pub const AUDIT_DIR: &str = "audit";
pub const QUEUE_FILE: &str = "queue.json";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("corrupt data in {}: {source}", path.display())]
    Corrupt { path: PathBuf, source: ModelError },
    #[error("{} already exists with different content", .0.display())]
    Collision(PathBuf),
    #[error("invalid id `{0}`")]
    InvalidId(String),
    #[error("invalid entity: {0}")]
    Invalid(#[from] ModelError),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("I/O on {}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Session ids become directory names, so they are restricted to a safe
/// character set.
pub fn check_id(id: &str) -> Result<(), StoreError> {
    let ok = !id.is_empty()
        && id != AUDIT_DIR
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidId(id.to_string()))
    }
}

/// Writes via a temporary sibling and a rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path.parent().expect("store paths have a parent");
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let name = path.file_name().expect("store paths have a file name").to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn read_entity<T: DeserializeOwned + Validate>(path: &Path, what: &str) -> Result<T, StoreError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(StoreError::NotFound(format!("{what} at {}", path.display())))
        }
        Err(e) => return Err(io_err(path)(e)),
    };
    from_canonical_json(&bytes).map_err(|source| StoreError::Corrupt {
        path: path.to_path_buf(),
        source,
    })
}

/// Id-keyed JSON store, one directory per session.
#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn session_dir(&self, session_id: &str) -> Result<PathBuf, StoreError> {
        check_id(session_id)?;
        Ok(self.root.join(session_id))
    }

    pub fn captures_dir(&self, session_id: &str) -> Result<PathBuf, StoreError> {
        Ok(self.session_dir(session_id)?.join(CAPTURES_DIR))
    }

    fn put<T: Serialize + Validate>(&self, path: &Path, value: &T, overwrite: bool) -> Result<(), StoreError> {
        let bytes = to_canonical_json(value)?;
        match fs::read(path) {
            Ok(existing) if existing == bytes => return Ok(()),
            Ok(_) if !overwrite => return Err(StoreError::Collision(path.to_path_buf())),
            Ok(_) => {}
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(io_err(path)(e)),
        }
        write_atomic(path, &bytes)
    }

    /// Storing identical bytes again is a no-op; different bytes collide
    /// unless `overwrite` is set.
    pub fn store_transcript(&self, transcript: &Transcript, overwrite: bool) -> Result<PathBuf, StoreError> {
        let path = self.session_dir(&transcript.session_id)?.join(TRANSCRIPT_FILE);
        self.put(&path, transcript, overwrite)?;
        Ok(path)
    }

    pub fn load_transcript(&self, session_id: &str) -> Result<Transcript, StoreError> {
        read_entity(&self.session_dir(session_id)?.join(TRANSCRIPT_FILE), "transcript")
    }

    pub fn store_council(&self, council: &CouncilResult, overwrite: bool) -> Result<PathBuf, StoreError> {
        let path = self.session_dir(&council.transcript_ref)?.join(COUNCIL_FILE);
        self.put(&path, council, overwrite)?;
        Ok(path)
    }

    pub fn load_council(&self, session_id: &str) -> Result<CouncilResult, StoreError> {
        read_entity(&self.session_dir(session_id)?.join(COUNCIL_FILE), "council result")
    }

    /// Sessions with at least one stored file, sorted.
    pub fn session_ids(&self) -> Result<Vec<String>, StoreError> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.root).map_err(io_err(&self.root))? {
            let entry = entry.map_err(io_err(&self.root))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if check_id(&name).is_err() || !entry.path().is_dir() {
                continue;
            }
            let dir = entry.path();
            if dir.join(TRANSCRIPT_FILE).exists() || dir.join(COUNCIL_FILE).exists() {
                ids.push(name);
            }
        }
        ids.sort();
        Ok(ids)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditStatus {
    Open,
    Resolved,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Decision {
    /// The chair grade stands.
    Affirm,
    /// Replacement scores, kept next to the untouched chair assessment.
    Override { scores: BTreeMap<String, u8>, total: u8 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resolution {
    pub auditor_id: String,
    pub decision: Decision,
    #[serde(default)]
    pub note: String,
    pub timestamp_ms: u64,
}

impl Validate for Resolution {
    fn validate(&self) -> Result<(), ModelError> {
        if self.auditor_id.trim().is_empty() {
            return Err(ModelError::schema("auditor_id", "must be non-empty"));
        }
        if let Decision::Override { scores, total } = &self.decision {
            for (dim, score) in scores {
                if *score > SCALE_MAX {
                    return Err(ModelError::schema(
                        format!("decision.scores.{dim}"),
                        format!("{score} is outside 0-{SCALE_MAX}"),
                    ));
                }
            }
            let sum: u32 = scores.values().map(|s| u32::from(*s)).sum();
            if *total > TOTAL_MAX || u32::from(*total) != sum {
                return Err(ModelError::schema(
                    "decision.total",
                    format!("total {total} does not equal the sum of scores {sum}"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditItem {
    pub id: String,
    /// Creation order.
    pub seq: u64,
    pub council_ref: String,
    pub flags: Vec<Flag>,
    pub status: AuditStatus,
    pub created_at_ms: u64,
    #[serde(default)]
    pub resolution: Option<Resolution>,
}

impl Validate for AuditItem {
    fn validate(&self) -> Result<(), ModelError> {
        if self.council_ref.trim().is_empty() {
            return Err(ModelError::schema("council_ref", "must be non-empty"));
        }
        match (self.status, &self.resolution) {
            (AuditStatus::Resolved, None) => Err(ModelError::schema("resolution", "resolved items need a resolution")),
            (AuditStatus::Open, Some(_)) => Err(ModelError::schema("resolution", "open items have no resolution")),
            (_, Some(r)) => r.validate(),
            (AuditStatus::Open, None) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueueFile {
    next_seq: u64,
    items: Vec<AuditItem>,
}

impl Validate for QueueFile {
    fn validate(&self) -> Result<(), ModelError> {
        let mut ids = BTreeSet::new();
        let mut councils = BTreeSet::new();
        for (i, item) in self.items.iter().enumerate() {
            item.validate().map_err(|e| match e {
                ModelError::Schema { field, message } => ModelError::schema(format!("items[{i}].{field}"), message),
                other => other,
            })?;
            if !ids.insert(&item.id) || !councils.insert(&item.council_ref) {
                return Err(ModelError::schema(format!("items[{i}]"), "duplicate item"));
            }
            if item.seq >= self.next_seq {
                return Err(ModelError::schema(format!("items[{i}].seq"), "seq beyond next_seq"));
            }
        }
        Ok(())
    }
}

/// The audit queue in `audit/queue.json`. Mutations go through one lock.
#[derive(Debug)]
pub struct AuditQueue {
    store: Store,
    path: PathBuf,
    writer: Mutex<()>,
}

impl AuditQueue {
    pub fn open(store: Store) -> Self {
        let path = store.root().join(AUDIT_DIR).join(QUEUE_FILE);
        Self {
            store,
            path,
            writer: Mutex::new(()),
        }
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    fn load(&self) -> Result<QueueFile, StoreError> {
        match read_entity::<QueueFile>(&self.path, "audit queue") {
            Err(StoreError::NotFound(_)) => Ok(QueueFile::default()),
            other => other,
        }
    }

    fn save(&self, queue: &QueueFile) -> Result<(), StoreError> {
        write_atomic(&self.path, &to_canonical_json(queue)?)
    }

    /// Opens an item for a flagged council. Returns the existing item if
    /// one is already queued for it, and `None` for unflagged councils.
    pub fn enqueue_flags(&self, council: &CouncilResult, now_ms: u64) -> Result<Option<AuditItem>, StoreError> {
        if !council.is_flagged() {
            return Ok(None);
        }
        let _guard = self.writer.lock().expect("audit writer lock poisoned");
        let mut queue = self.load()?;
        if let Some(existing) = queue.items.iter().find(|i| i.council_ref == council.transcript_ref) {
            return Ok(Some(existing.clone()));
        }
        let seq = queue.next_seq;
        let item = AuditItem {
            id: format!("audit-{seq:05}"),
            seq,
            council_ref: council.transcript_ref.clone(),
            flags: council.flags.clone(),
            status: AuditStatus::Open,
            created_at_ms: now_ms,
            resolution: None,
        };
        queue.next_seq += 1;
        queue.items.push(item.clone());
        self.save(&queue)?;
        Ok(Some(item))
    }

    /// Items in creation order, optionally filtered by status.
    pub fn list(&self, status: Option<AuditStatus>) -> Result<Vec<AuditItem>, StoreError> {
        let mut items = self.load()?.items;
        items.retain(|i| status.map_or(true, |s| i.status == s));
        items.sort_by_key(|i| i.seq);
        Ok(items)
    }

    pub fn get(&self, id: &str) -> Result<AuditItem, StoreError> {
        self.load()?
            .items
            .into_iter()
            .find(|i| i.id == id)
            .ok_or_else(|| StoreError::NotFound(format!("audit item {id}")))
    }

    /// Records a resolution. Overrides must cover exactly the chair's
    /// dimensions. The stored chair assessment is left as it is.
    pub fn resolve(&self, id: &str, resolution: Resolution) -> Result<AuditItem, StoreError> {
        resolution.validate()?;
        let _guard = self.writer.lock().expect("audit writer lock poisoned");
        let mut queue = self.load()?;
        let item = queue
            .items
            .iter_mut()
            .find(|i| i.id == id)
            .ok_or_else(|| StoreError::NotFound(format!("audit item {id}")))?;
        if item.status == AuditStatus::Resolved {
            return Err(StoreError::Conflict(format!("audit item {id} is already resolved")));
        }
        if let Decision::Override { scores, .. } = &resolution.decision {
            let council = self.store.load_council(&item.council_ref)?;
            let expected: BTreeSet<&str> = council.chair.scores.iter().map(|s| s.dimension_id.as_str()).collect();
            let actual: BTreeSet<&str> = scores.keys().map(String::as_str).collect();
            if expected != actual {
                return Err(StoreError::Invalid(ModelError::schema(
                    "decision.scores",
                    "override must score exactly the chair's dimensions",
                )));
            }
        }
        item.status = AuditStatus::Resolved;
        item.resolution = Some(resolution);
        let resolved = item.clone();
        self.save(&queue)?;
        Ok(resolved)
    }
}
