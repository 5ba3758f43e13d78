//! The examination state machine.
//!
//! A session runs auth → project → case → ended. Transitions are decided
//! here, never by the model: auth succeeds on a roster match, and the
//! project and case phases end when their question budgets are spent.
//! Every generated examiner turn passes the turn guard before it is
//! committed.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendError, CaptureLog, CompletionRequest, Message};
use crate::cases::{seed_from_session_id, select_case, CaseCatalog, CaseError};
use crate::guard::{
    self, count_questions, first_question, validate_examiner_turn, ClarificationPatterns, GuardReason,
    PatternFile,
};
use crate::model::{
    validate_turns, Annotation, ExamCase, ModelError, Phase, Role, StudentContext, Termination, Transcript,
    Turn, Validate,
};
use crate::template::{session_vars, PromptTemplate, TemplateError};

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Deterministic clock: `start`, `start + step`, `start + 2 * step`, ...
#[derive(Debug)]
pub struct SimClock {
    next: AtomicU64,
    step: u64,
}

impl SimClock {
    pub fn new(start: u64, step: u64) -> Self {
        Self {
            next: AtomicU64::new(start),
            step,
        }
    }
}

impl Clock for SimClock {
    fn now_ms(&self) -> u64 {
        self.next.fetch_add(self.step, Ordering::SeqCst)
    }
}

/// Clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock {
    now: AtomicU64,
}

impl ManualClock {
    pub fn new(start: u64) -> Self {
        Self {
            now: AtomicU64::new(start),
        }
    }

    pub fn set(&self, now_ms: u64) {
        self.now.store(now_ms, Ordering::SeqCst);
    }

    pub fn advance(&self, ms: u64) {
        self.now.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }
}

fn default_deadline() -> f64 {
    10.0
}
fn default_auth_attempts() -> u32 {
    3
}
fn default_budget() -> u32 {
    6
}
fn default_true() -> bool {
    true
}
fn default_regenerations() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    #[serde(default)]
    pub session_id: Option<String>,
    #[serde(default = "default_deadline")]
    pub silence_deadline_secs: f64,
    #[serde(default = "default_auth_attempts")]
    pub max_auth_attempts: u32,
    #[serde(default = "default_budget")]
    pub project_questions: u32,
    #[serde(default = "default_budget")]
    pub case_questions: u32,
    #[serde(default = "default_true")]
    pub project_enabled: bool,
    #[serde(default = "default_true")]
    pub case_enabled: bool,
    /// Guard-rejected turns are regenerated at most this many times.
    #[serde(default = "default_regenerations")]
    pub max_regenerations: u32,
    /// Case-selection seed; derived from the session id when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Authorized student ids. When absent only the session's own student id is accepted.
    #[serde(default)]
    pub roster: Option<BTreeSet<String>>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            session_id: None,
            silence_deadline_secs: default_deadline(),
            max_auth_attempts: default_auth_attempts(),
            project_questions: default_budget(),
            case_questions: default_budget(),
            project_enabled: true,
            case_enabled: true,
            max_regenerations: default_regenerations(),
            seed: None,
            roster: None,
        }
    }
}

impl Validate for SessionConfig {
    fn validate(&self) -> Result<(), ModelError> {
        if !(self.silence_deadline_secs.is_finite() && self.silence_deadline_secs > 0.0) {
            return Err(ModelError::schema("silence_deadline_secs", "must be positive"));
        }
        if self.max_auth_attempts == 0 {
            return Err(ModelError::schema("max_auth_attempts", "must be at least 1"));
        }
        if self.project_questions == 0 {
            return Err(ModelError::schema("project_questions", "must be at least 1"));
        }
        if self.case_questions == 0 {
            return Err(ModelError::schema("case_questions", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionPhase {
    Auth,
    Project,
    Case,
    Ended,
}

impl SessionPhase {
    pub fn exam_phase(self) -> Option<Phase> {
        match self {
            SessionPhase::Auth => Some(Phase::Auth),
            SessionPhase::Project => Some(Phase::Project),
            SessionPhase::Case => Some(Phase::Case),
            SessionPhase::Ended => None,
        }
    }
}

impl From<Phase> for SessionPhase {
    fn from(phase: Phase) -> Self {
        match phase {
            Phase::Auth => SessionPhase::Auth,
            Phase::Project => SessionPhase::Project,
            Phase::Case => SessionPhase::Case,
        }
    }
}

/// Everything needed to continue a session; persistable between turns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionState {
    pub session_id: String,
    pub student: StudentContext,
    pub config: SessionConfig,
    pub phase: SessionPhase,
    pub auth_attempts: u32,
    /// Exact text of the last question posed, for verbatim replay.
    pub pending_question: Option<String>,
    pub clarification_count_for_pending: u32,
    /// Whether the current pending question has already drawn a silence nudge.
    pub nudged_pending: bool,
    /// Questions asked so far in the current phase.
    pub questions_asked: u32,
    pub turns: Vec<Turn>,
    pub seed: u64,
    pub selected_case: Option<ExamCase>,
    pub case_index: Option<usize>,
    pub started_at_ms: u64,
    pub ended_at_ms: Option<u64>,
    pub termination: Option<Termination>,
    /// Set when a backend call failed; the session waits for `resume`.
    pub suspended: bool,
}

impl SessionState {
    fn tag_phase(&self) -> Phase {
        self.phase
            .exam_phase()
            .or_else(|| self.turns.last().map(|t| t.phase))
            .unwrap_or(Phase::Auth)
    }

    pub(crate) fn push_turn<I>(&mut self, role: Role, text: String, now_ms: u64, annotations: I) -> Turn
    where
        I: IntoIterator<Item = Annotation>,
    {
        let turn = Turn {
            index: self.turns.len() as u32,
            role,
            phase: self.tag_phase(),
            text,
            timestamp_ms: now_ms,
            annotations: annotations.into_iter().collect(),
        };
        self.turns.push(turn.clone());
        turn
    }

    /// Records a freshly posed examiner question as the replay target.
    fn pose(&mut self, text: &str) {
        self.pending_question = (count_questions(text) >= 1).then(|| text.to_string());
        self.clarification_count_for_pending = 0;
        self.nudged_pending = false;
    }

    pub fn is_ended(&self) -> bool {
        self.phase == SessionPhase::Ended
    }

    /// Snapshot as a transcript. In-progress sessions are reported as
    /// aborted at the time of their last turn.
    pub fn transcript(&self) -> Transcript {
        let last = self.turns.last().map_or(self.started_at_ms, |t| t.timestamp_ms);
        Transcript {
            session_id: self.session_id.clone(),
            student: self.student.clone(),
            case: self.selected_case.clone(),
            case_index: self.case_index,
            seed: Some(self.seed),
            turns: self.turns.clone(),
            started_at_ms: self.started_at_ms,
            ended_at_ms: self.ended_at_ms.unwrap_or(last).max(self.started_at_ms),
            termination: self.termination.unwrap_or(Termination::Aborted),
        }
    }
}

impl Validate for SessionState {
    fn validate(&self) -> Result<(), ModelError> {
        self.config.validate()?;
        validate_turns(&self.turns)?;
        if self.is_ended() != self.termination.is_some() {
            return Err(ModelError::schema("termination", "set iff the session has ended"));
        }
        Ok(())
    }
}

/// Phase prompts. `auth` is the examiner's opening line; `project` and
/// `case` are system prompts for the examiner model.
#[derive(Debug, Clone)]
pub struct PhaseTemplates {
    pub auth: PromptTemplate,
    pub project: PromptTemplate,
    pub case: PromptTemplate,
}

impl PhaseTemplates {
    /// Loads `auth.txt`, `project.txt` and `case.txt` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        Ok(Self {
            auth: PromptTemplate::load(&dir.join("auth.txt"))?,
            project: PromptTemplate::load(&dir.join("project.txt"))?,
            case: PromptTemplate::load(&dir.join("case.txt"))?,
        })
    }

    fn for_phase(&self, phase: Phase) -> &PromptTemplate {
        match phase {
            Phase::Auth => &self.auth,
            Phase::Project => &self.project,
            Phase::Case => &self.case,
        }
    }
}

/// Fixed examiner lines that never go through a model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExaminerLines {
    pub auth_retry: String,
    pub auth_failed: String,
    pub closing: String,
    pub nudge: String,
    pub fallback_question: String,
    pub begin_phase: String,
}

impl Default for ExaminerLines {
    fn default() -> Self {
        Self {
            auth_retry: "I could not match that ID to this session. What is your student ID?".into(),
            auth_failed: "I was unable to verify your identity, so this session has ended. Please contact your instructor.".into(),
            closing: "Thank you, that concludes the examination. Your transcript has been saved for grading.".into(),
            nudge: "Are you there? Take your time.".into(),
            fallback_question: "Could you walk me through your reasoning on that in more detail?".into(),
            begin_phase: "Begin this part of the examination with your first question.".into(),
        }
    }
}

/// What the examiner did in response to a student turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExaminerAction {
    /// Next question within the current phase.
    Ask { turn: Turn },
    /// The pending question, replayed verbatim.
    Repeat { turn: Turn },
    /// Moved to a new phase and asked its first question.
    Transition { to: Phase, turn: Turn },
    /// Session over.
    End { termination: Termination, turn: Turn },
    /// No examiner turn; a system note was logged.
    Note { turn: Turn },
}

impl ExaminerAction {
    pub fn turn(&self) -> &Turn {
        match self {
            ExaminerAction::Ask { turn }
            | ExaminerAction::Repeat { turn }
            | ExaminerAction::Transition { turn, .. }
            | ExaminerAction::End { turn, .. }
            | ExaminerAction::Note { turn } => turn,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("invalid session config: {0}")]
    Config(ModelError),
    #[error("invalid student context: {0}")]
    Student(ModelError),
    #[error("project summary is required when the project phase is enabled")]
    MissingProjectSummary,
    #[error("template: {0}")]
    Template(#[from] TemplateError),
    #[error("case catalog: {0}")]
    Catalog(#[from] CaseError),
    #[error("fixed examiner text `{name}` fails the turn guard ({reason:?})")]
    InvalidFixedText { name: String, reason: GuardReason },
    #[error("session has ended")]
    Ended,
    #[error("session is suspended after a backend failure; resume it first")]
    Suspended,
    #[error("session is not suspended")]
    NotSuspended,
    #[error("student turn is empty")]
    EmptyStudentTurn,
    #[error("backend failure (session suspended): {0}")]
    Backend(#[from] BackendError),
}

enum Patterns {
    Static(ClarificationPatterns),
    File(Arc<PatternFile>),
}

impl Patterns {
    fn current(&self) -> ClarificationPatterns {
        match self {
            Patterns::Static(p) => p.clone(),
            Patterns::File(f) => f.snapshot(),
        }
    }
}

pub struct Orchestrator {
    templates: PhaseTemplates,
    catalog: CaseCatalog,
    backend: Arc<dyn Backend>,
    clock: Arc<dyn Clock>,
    patterns: Patterns,
    lines: ExaminerLines,
    capture: Option<CaptureLog>,
}

impl Orchestrator {
    pub fn new(templates: PhaseTemplates, catalog: CaseCatalog, backend: Arc<dyn Backend>) -> Self {
        Self {
            templates,
            catalog,
            backend,
            clock: Arc::new(SystemClock),
            patterns: Patterns::Static(ClarificationPatterns::default()),
            lines: ExaminerLines::default(),
            capture: None,
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_patterns(mut self, patterns: ClarificationPatterns) -> Self {
        self.patterns = Patterns::Static(patterns);
        self
    }

    pub fn with_pattern_file(mut self, file: Arc<PatternFile>) -> Self {
        self.patterns = Patterns::File(file);
        self
    }

    pub fn with_lines(mut self, lines: ExaminerLines) -> Self {
        self.lines = lines;
        self
    }

    /// Records every examiner-model exchange.
    pub fn with_capture(mut self, capture: CaptureLog) -> Self {
        self.capture = Some(capture);
        self
    }

    pub fn catalog(&self) -> &CaseCatalog {
        &self.catalog
    }

    pub fn start_session(
        &self,
        student: StudentContext,
        config: SessionConfig,
    ) -> Result<(SessionState, Turn), SessionError> {
        config.validate().map_err(SessionError::Config)?;
        student.validate().map_err(SessionError::Student)?;
        if config.project_enabled && student.project_summary.trim().is_empty() {
            return Err(SessionError::MissingProjectSummary);
        }
        for (name, text) in [
            ("auth_retry", &self.lines.auth_retry),
            ("auth_failed", &self.lines.auth_failed),
            ("closing", &self.lines.closing),
            ("nudge", &self.lines.nudge),
            ("fallback_question", &self.lines.fallback_question),
        ] {
            let verdict = validate_examiner_turn(text);
            if !verdict.accepted() {
                return Err(SessionError::InvalidFixedText {
                    name: name.into(),
                    reason: verdict.reason,
                });
            }
        }

        let started_at_ms = self.clock.now_ms();
        let session_id = config
            .session_id
            .clone()
            .unwrap_or_else(|| format!("{}-{started_at_ms}", student.student_id));
        let seed = config.seed.unwrap_or_else(|| seed_from_session_id(&session_id));
        let (selected_case, case_index) = if config.case_enabled {
            let selection = select_case(seed, &self.catalog)?;
            (Some(selection.case), Some(selection.index))
        } else {
            (None, None)
        };

        // Render every phase up front so a missing variable fails at start.
        let vars = session_vars(&session_id, &student, selected_case.as_ref(), seed);
        let opening = self.templates.auth.render(&vars)?;
        if config.project_enabled {
            self.templates.project.render(&vars)?;
        }
        if config.case_enabled {
            self.templates.case.render(&vars)?;
        }
        let verdict = validate_examiner_turn(&opening);
        if !verdict.accepted() {
            return Err(SessionError::InvalidFixedText {
                name: "auth".into(),
                reason: verdict.reason,
            });
        }

        let mut state = SessionState {
            session_id,
            student,
            config,
            phase: SessionPhase::Auth,
            auth_attempts: 0,
            pending_question: None,
            clarification_count_for_pending: 0,
            nudged_pending: false,
            questions_asked: 0,
            turns: Vec::new(),
            seed,
            selected_case,
            case_index,
            started_at_ms,
            ended_at_ms: None,
            termination: None,
            suspended: false,
        };
        let turn = state.push_turn(Role::Examiner, opening.trim().to_string(), started_at_ms, []);
        state.pose(&turn.text);
        Ok((state, turn))
    }

    pub fn advance(&self, state: &mut SessionState, student_text: &str) -> Result<ExaminerAction, SessionError> {
        if state.is_ended() {
            return Err(SessionError::Ended);
        }
        if state.suspended {
            return Err(SessionError::Suspended);
        }
        let text = student_text.trim();
        if text.is_empty() {
            return Err(SessionError::EmptyStudentTurn);
        }
        state.push_turn(Role::Student, text.to_string(), self.clock.now_ms(), []);

        if self.patterns.current().is_clarification_request(text) {
            let now = self.clock.now_ms();
            return Ok(match guard::replay_pending(state, now) {
                Some(turn) => {
                    state.clarification_count_for_pending += 1;
                    ExaminerAction::Repeat { turn }
                }
                None => ExaminerAction::Note {
                    turn: state.turns.last().cloned().expect("note was just pushed"),
                },
            });
        }

        match state.phase {
            SessionPhase::Auth => self.handle_auth(state, text),
            SessionPhase::Project | SessionPhase::Case => {
                let budget = match state.phase {
                    SessionPhase::Project => state.config.project_questions,
                    _ => state.config.case_questions,
                };
                if state.questions_asked < budget {
                    let turn = self.generate_question(state)?;
                    Ok(ExaminerAction::Ask { turn })
                } else {
                    self.leave_phase(state)
                }
            }
            SessionPhase::Ended => Err(SessionError::Ended),
        }
    }

    /// Retries the examiner turn that failed with a backend error.
    pub fn resume(&self, state: &mut SessionState) -> Result<ExaminerAction, SessionError> {
        if !state.suspended {
            return Err(SessionError::NotSuspended);
        }
        state.suspended = false;
        let turn = self.generate_question(state)?;
        Ok(ExaminerAction::Ask { turn })
    }

    /// Emits the silence nudge once `elapsed_secs` reaches the deadline,
    /// at most once per pending question.
    pub fn on_silence(&self, state: &mut SessionState, elapsed_secs: f64) -> Option<Turn> {
        if state.is_ended() || state.suspended || state.nudged_pending {
            return None;
        }
        let awaiting_student = state
            .turns
            .iter()
            .rev()
            .find(|t| t.role != Role::System)
            .is_some_and(|t| t.role == Role::Examiner);
        if !awaiting_student || elapsed_secs < state.config.silence_deadline_secs {
            return None;
        }
        state.nudged_pending = true;
        let now = self.clock.now_ms();
        Some(state.push_turn(Role::Examiner, self.lines.nudge.clone(), now, [Annotation::SilenceNudge]))
    }

    /// Aborts an open session and returns its transcript.
    pub fn end_session(&self, state: &mut SessionState) -> Transcript {
        if !state.is_ended() {
            let now = self.clock.now_ms();
            state.push_turn(Role::System, "session aborted".into(), now, []);
            self.finish(state, Termination::Aborted, now);
        }
        state.transcript()
    }

    fn finish(&self, state: &mut SessionState, termination: Termination, now: u64) {
        state.phase = SessionPhase::Ended;
        state.termination = Some(termination);
        state.ended_at_ms = Some(now);
        state.pending_question = None;
        state.suspended = false;
    }

    fn end_with(&self, state: &mut SessionState, termination: Termination, line: String) -> ExaminerAction {
        let now = self.clock.now_ms();
        let turn = state.push_turn(Role::Examiner, line, now, []);
        self.finish(state, termination, now);
        ExaminerAction::End { termination, turn }
    }

    fn authenticates(&self, state: &SessionState, text: &str) -> bool {
        let expected = state.student.student_id.trim().to_lowercase();
        let on_roster = state
            .config
            .roster
            .as_ref()
            .map_or(true, |r| r.iter().any(|id| id.trim().to_lowercase() == expected));
        on_roster
            && text
                .split_whitespace()
                .map(|tok| tok.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
                .any(|tok| tok == expected)
    }

    fn handle_auth(&self, state: &mut SessionState, text: &str) -> Result<ExaminerAction, SessionError> {
        if self.authenticates(state, text) {
            let now = self.clock.now_ms();
            state.push_turn(Role::System, format!("identity verified: {}", state.student.student_id), now, []);
            return self.enter_next_phase(state, Phase::Auth);
        }
        state.auth_attempts += 1;
        if state.auth_attempts >= state.config.max_auth_attempts {
            return Ok(self.end_with(state, Termination::AuthFailed, self.lines.auth_failed.clone()));
        }
        let now = self.clock.now_ms();
        let turn = state.push_turn(Role::Examiner, self.lines.auth_retry.clone(), now, []);
        state.pose(&turn.text);
        Ok(ExaminerAction::Ask { turn })
    }

    fn leave_phase(&self, state: &mut SessionState) -> Result<ExaminerAction, SessionError> {
        let current = state.phase.exam_phase().ok_or(SessionError::Ended)?;
        self.enter_next_phase(state, current)
    }

    fn enter_next_phase(&self, state: &mut SessionState, from: Phase) -> Result<ExaminerAction, SessionError> {
        let next = match from {
            Phase::Auth if state.config.project_enabled => Some(Phase::Project),
            Phase::Auth | Phase::Project if state.config.case_enabled => Some(Phase::Case),
            _ => None,
        };
        let Some(next) = next else {
            return Ok(self.end_with(state, Termination::Completed, self.lines.closing.clone()));
        };
        state.phase = next.into();
        state.questions_asked = 0;
        state.pending_question = None;
        let turn = self.generate_question(state)?;
        Ok(ExaminerAction::Transition { to: next, turn })
    }

    fn phase_messages(&self, state: &SessionState, phase: Phase) -> Result<Vec<Message>, SessionError> {
        let vars = session_vars(&state.session_id, &state.student, state.selected_case.as_ref(), state.seed);
        let system = self.templates.for_phase(phase).render(&vars)?;
        let mut messages = vec![Message::system(system)];
        for turn in state.turns.iter().filter(|t| t.phase == phase) {
            match turn.role {
                Role::Examiner if !turn.has(Annotation::SilenceNudge) => {
                    messages.push(Message::assistant(turn.text.clone()))
                }
                Role::Student => messages.push(Message::user(turn.text.clone())),
                _ => {}
            }
        }
        if messages.last().map(|m| m.role) != Some(crate::backend::MessageRole::User) {
            messages.push(Message::user(self.lines.begin_phase.clone()));
        }
        Ok(messages)
    }

    fn call(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let result = self.backend.complete(request);
        if let Some(capture) = &self.capture {
            capture.record(self.backend.id(), request, &result);
        }
        result.map(|r| r.text)
    }

    /// Asks the model for the next question, regenerating rejected turns
    /// and falling back to the first question when the budget runs out.
    fn generate_question(&self, state: &mut SessionState) -> Result<Turn, SessionError> {
        let phase = state.phase.exam_phase().ok_or(SessionError::Ended)?;
        let mut messages = self.phase_messages(state, phase)?;
        let question_no = state.questions_asked + 1;
        let mut last = String::new();
        let mut accepted = None;
        for attempt in 0..=state.config.max_regenerations {
            let request = CompletionRequest::new(
                format!("exam.{}.{}.q{question_no}.a{attempt}", state.session_id, phase),
                messages.clone(),
            );
            let text = match self.call(&request) {
                Ok(text) => text.trim().to_string(),
                Err(err) => {
                    state.suspended = true;
                    return Err(err.into());
                }
            };
            let verdict = validate_examiner_turn(&text);
            if verdict.accepted() {
                accepted = Some(text);
                break;
            }
            let correction = match verdict.reason {
                GuardReason::MultiQuestion => format!(
                    "Your last message asked {} questions. Rewrite it so that it asks exactly one question.",
                    verdict.question_count
                ),
                _ => "Your last message was empty. Ask exactly one question.".to_string(),
            };
            messages.push(Message::assistant(text.clone()));
            messages.push(Message::user(correction));
            last = text;
        }
        let text = match accepted {
            Some(text) => text,
            None => {
                let now = self.clock.now_ms();
                let fallback = first_question(&last).unwrap_or_else(|| self.lines.fallback_question.clone());
                state.push_turn(
                    Role::System,
                    format!(
                        "turn guard: regeneration budget exhausted after {} attempts; sending the first question only",
                        state.config.max_regenerations + 1
                    ),
                    now,
                    [],
                );
                fallback
            }
        };
        let now = self.clock.now_ms();
        let turn = state.push_turn(Role::Examiner, text, now, []);
        state.questions_asked += 1;
        state.pose(&turn.text);
        Ok(turn)
    }
}
