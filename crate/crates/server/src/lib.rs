//! HTTP API over the examination engine.
//!
//! Sessions:
//!
//! | Method | Path | |
//! |---|---|---|
//! | POST | `/api/sessions` | create a session, returns the opening turn |
//! | POST | `/api/sessions/{id}/turns` | submit a student turn |
//! | GET | `/api/sessions/{id}/turns?since=N` | poll turns with index ≥ N |
//! | POST | `/api/sessions/{id}/silence` | silence tick; the server decides on the nudge |
//! | POST | `/api/sessions/{id}/resume` | retry after a backend failure |
//! | POST | `/api/sessions/{id}/end` | end the session, returns the transcript |
//!
//! Audit:
//!
//! | Method | Path | |
//! |---|---|---|
//! | GET | `/api/audit?status=open` | list the queue |
//! | GET | `/api/audit/{id}` | item with its council result and transcript |
//! | POST | `/api/audit/{id}/resolution` | affirm or override |

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use viva_core::model::{
    from_canonical_json, to_canonical_json, CouncilResult, Phase, Role, StudentContext, Termination, Transcript,
    Turn,
};
use viva_core::orchestrator::{Clock, ExaminerAction, Orchestrator, SessionConfig, SessionError, SessionPhase, SessionState};
use viva_core::storage::{AuditItem, AuditQueue, AuditStatus, Decision, Resolution, Store, StoreError};

pub const SESSION_FILE: &str = "session.json";

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("session `{0}` already exists")]
    SessionExists(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match self {
            ApiError::Session(e) => match e {
                SessionError::Ended | SessionError::Suspended | SessionError::NotSuspended => StatusCode::CONFLICT,
                SessionError::EmptyStudentTurn
                | SessionError::Config(_)
                | SessionError::Student(_)
                | SessionError::MissingProjectSummary => StatusCode::UNPROCESSABLE_ENTITY,
                SessionError::Backend(_) => StatusCode::SERVICE_UNAVAILABLE,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            },
            ApiError::Store(e) => match e {
                StoreError::NotFound(_) => StatusCode::NOT_FOUND,
                StoreError::Conflict(_) | StoreError::Collision(_) => StatusCode::CONFLICT,
                StoreError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
                StoreError::InvalidId(_) => StatusCode::BAD_REQUEST,
                StoreError::Corrupt { .. } | StoreError::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            },
            ApiError::UnknownSession(_) => StatusCode::NOT_FOUND,
            ApiError::SessionExists(_) => StatusCode::CONFLICT,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            tracing::error!(error = %self, "request failed");
        }
        (status, Json(ErrorBody { error: self.to_string() })).into_response()
    }
}

/// Shared server state.
pub struct AppState {
    orchestrator: Orchestrator,
    clock: Arc<dyn Clock>,
    store: Store,
    queue: AuditQueue,
    base_config: SessionConfig,
    sessions: Mutex<HashMap<String, Arc<Mutex<SessionState>>>>,
}

impl AppState {
    /// `clock` must be the clock the orchestrator uses; silence is measured
    /// against it. `base_config` applies to every session; clients may only
    /// choose the session id and seed.
    pub fn new(orchestrator: Orchestrator, clock: Arc<dyn Clock>, store: Store, base_config: SessionConfig) -> Self {
        let queue = AuditQueue::open(store.clone());
        Self {
            orchestrator,
            clock,
            store,
            queue,
            base_config,
            sessions: Mutex::new(HashMap::new()),
        }
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn queue(&self) -> &AuditQueue {
        &self.queue
    }

    fn session_path(&self, id: &str) -> Result<PathBuf, ApiError> {
        Ok(self.store.session_dir(id)?.join(SESSION_FILE))
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<SessionState>>, ApiError> {
        let mut sessions = self.sessions.lock().expect("session table poisoned");
        if let Some(s) = sessions.get(id) {
            return Ok(s.clone());
        }
        let path = self.session_path(id)?;
        let bytes = std::fs::read(&path).map_err(|_| ApiError::UnknownSession(id.to_string()))?;
        let state: SessionState = from_canonical_json(&bytes).map_err(|source| StoreError::Corrupt {
            path: path.clone(),
            source,
        })?;
        let slot = Arc::new(Mutex::new(state));
        sessions.insert(id.to_string(), slot.clone());
        Ok(slot)
    }

    /// Writes the session state, and the transcript once the session ends.
    fn persist(&self, state: &SessionState) -> Result<(), ApiError> {
        let path = self.session_path(&state.session_id)?;
        let bytes = to_canonical_json(state).map_err(StoreError::from)?;
        std::fs::create_dir_all(path.parent().expect("session dir")).map_err(|e| ApiError::Internal(e.to_string()))?;
        std::fs::write(&path, bytes).map_err(|e| ApiError::Internal(e.to_string()))?;
        if state.is_ended() {
            self.store.store_transcript(&state.transcript(), true)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub student: StudentContext,
    #[serde(default)]
    pub session_id: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    /// `None` once the session has ended.
    pub phase: Option<Phase>,
    pub ended: bool,
    pub termination: Option<Termination>,
    pub suspended: bool,
    pub silence_deadline_secs: f64,
    pub turns: Vec<Turn>,
}

impl SessionView {
    fn of(state: &SessionState, since: u32) -> Self {
        Self {
            session_id: state.session_id.clone(),
            phase: state.phase.exam_phase(),
            ended: state.phase == SessionPhase::Ended,
            termination: state.termination,
            suspended: state.suspended,
            silence_deadline_secs: state.config.silence_deadline_secs,
            turns: state.turns.iter().filter(|t| t.index >= since).cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentTurn {
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActionResponse {
    pub action: ExaminerAction,
    pub session: SessionView,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SilenceResponse {
    pub elapsed_secs: f64,
    pub nudge: Option<Turn>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct PollQuery {
    #[serde(default)]
    pub since: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolutionRequest {
    pub auditor_id: String,
    pub decision: Decision,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct QueueQuery {
    #[serde(default)]
    pub status: Option<AuditStatus>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditDetail {
    pub item: AuditItem,
    pub council: CouncilResult,
    pub transcript: Option<Transcript>,
}

type Shared = Arc<AppState>;

async fn blocking<T, F>(app: Shared, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&AppState) -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&app))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
}

async fn create_session(
    State(app): State<Shared>,
    Json(body): Json<CreateSession>,
) -> Result<(StatusCode, Json<SessionView>), ApiError> {
    blocking(app, move |app| {
        let mut config = app.base_config.clone();
        config.session_id = body.session_id.or(config.session_id);
        config.seed = body.seed.or(config.seed);
        if let Some(id) = &config.session_id {
            if app.session_path(id)?.exists() {
                return Err(ApiError::SessionExists(id.clone()));
            }
        }
        let (state, _) = app.orchestrator.start_session(body.student, config)?;
        let mut sessions = app.sessions.lock().expect("session table poisoned");
        if sessions.contains_key(&state.session_id) || app.session_path(&state.session_id)?.exists() {
            return Err(ApiError::SessionExists(state.session_id));
        }
        app.persist(&state)?;
        let view = SessionView::of(&state, 0);
        sessions.insert(state.session_id.clone(), Arc::new(Mutex::new(state)));
        Ok((StatusCode::CREATED, Json(view)))
    })
    .await
}

/// Runs `f` on the session under its lock and persists the result, also
/// when `f` fails (a backend failure suspends the session).
fn with_session<T>(
    app: &AppState,
    id: &str,
    f: impl FnOnce(&AppState, &mut SessionState) -> Result<T, ApiError>,
) -> Result<T, ApiError> {
    let slot = app.session(id)?;
    let mut state = slot.lock().expect("session lock poisoned");
    let before = state.turns.len();
    let suspended = state.suspended;
    let ended = state.is_ended();
    let result = f(app, &mut state);
    if state.turns.len() != before || state.suspended != suspended || state.is_ended() != ended {
        app.persist(&state)?;
    }
    result
}

async fn post_turn(
    State(app): State<Shared>,
    Path(id): Path<String>,
    Json(body): Json<StudentTurn>,
) -> Result<Json<ActionResponse>, ApiError> {
    blocking(app, move |app| {
        with_session(app, &id, |app, state| {
            let since = state.turns.len() as u32;
            let action = app.orchestrator.advance(state, &body.text)?;
            Ok(Json(ActionResponse {
                action,
                session: SessionView::of(state, since),
            }))
        })
    })
    .await
}

async fn poll_turns(
    State(app): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<PollQuery>,
) -> Result<Json<SessionView>, ApiError> {
    blocking(app, move |app| {
        let slot = app.session(&id)?;
        let state = slot.lock().expect("session lock poisoned");
        Ok(Json(SessionView::of(&state, q.since)))
    })
    .await
}

async fn silence_tick(State(app): State<Shared>, Path(id): Path<String>) -> Result<Json<SilenceResponse>, ApiError> {
    blocking(app, move |app| {
        with_session(app, &id, |app, state| {
            let last_examiner = state
                .turns
                .iter()
                .rev()
                .find(|t| t.role != Role::System)
                .filter(|t| t.role == Role::Examiner)
                .map(|t| t.timestamp_ms);
            let elapsed_secs = last_examiner
                .map(|ts| app.clock.now_ms().saturating_sub(ts) as f64 / 1000.0)
                .unwrap_or(0.0);
            let nudge = app.orchestrator.on_silence(state, elapsed_secs);
            Ok(Json(SilenceResponse { elapsed_secs, nudge }))
        })
    })
    .await
}

async fn resume(State(app): State<Shared>, Path(id): Path<String>) -> Result<Json<ActionResponse>, ApiError> {
    blocking(app, move |app| {
        with_session(app, &id, |app, state| {
            let since = state.turns.len() as u32;
            let action = app.orchestrator.resume(state)?;
            Ok(Json(ActionResponse {
                action,
                session: SessionView::of(state, since),
            }))
        })
    })
    .await
}

async fn end_session(State(app): State<Shared>, Path(id): Path<String>) -> Result<Json<Transcript>, ApiError> {
    blocking(app, move |app| {
        with_session(app, &id, |app, state| Ok(Json(app.orchestrator.end_session(state))))
    })
    .await
}

async fn list_queue(
    State(app): State<Shared>,
    Query(q): Query<QueueQuery>,
) -> Result<Json<Vec<AuditItem>>, ApiError> {
    blocking(app, move |app| Ok(Json(app.queue.list(q.status)?))).await
}

async fn get_item(State(app): State<Shared>, Path(id): Path<String>) -> Result<Json<AuditDetail>, ApiError> {
    blocking(app, move |app| {
        let item = app.queue.get(&id)?;
        let council = app.store.load_council(&item.council_ref)?;
        let transcript = match app.store.load_transcript(&item.council_ref) {
            Ok(t) => Some(t),
            Err(StoreError::NotFound(_)) => None,
            Err(e) => return Err(e.into()),
        };
        Ok(Json(AuditDetail {
            item,
            council,
            transcript,
        }))
    })
    .await
}

async fn post_resolution(
    State(app): State<Shared>,
    Path(id): Path<String>,
    Json(body): Json<ResolutionRequest>,
) -> Result<Json<AuditItem>, ApiError> {
    blocking(app, move |app| {
        let resolution = Resolution {
            auditor_id: body.auditor_id,
            decision: body.decision,
            note: body.note,
            timestamp_ms: app.clock.now_ms(),
        };
        Ok(Json(app.queue.resolve(&id, resolution)?))
    })
    .await
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}/turns", post(post_turn).get(poll_turns))
        .route("/api/sessions/{id}/silence", post(silence_tick))
        .route("/api/sessions/{id}/resume", post(resume))
        .route("/api/sessions/{id}/end", post(end_session))
        .route("/api/audit", get(list_queue))
        .route("/api/audit/{id}", get(get_item))
        .route("/api/audit/{id}/resolution", post(post_resolution))
        .with_state(app)
}

pub async fn serve(addr: SocketAddr, app: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(app)).await
}
