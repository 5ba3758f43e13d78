//! Turn guards: single-question enforcement, clarification detection and
//! verbatim replay, and stacked-question annotation for graders.

use std::path::{Path, PathBuf};
use std::sync::RwLock;
use std::time::SystemTime;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::model::{Annotation, Role, Transcript, Turn};
use crate::orchestrator::SessionState;

/// Default clarification patterns, identical to the shipped `clarification_patterns.txt`.
pub const DEFAULT_CLARIFICATION_PATTERNS: &str = include_str!("../../../clarification_patterns.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardOutcome {
    Accept,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardReason {
    MultiQuestion,
    Empty,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuardVerdict {
    pub outcome: GuardOutcome,
    pub reason: GuardReason,
    pub question_count: usize,
}

impl GuardVerdict {
    pub fn accepted(&self) -> bool {
        self.outcome == GuardOutcome::Accept
    }
}

/// Counts sentence-terminal question marks: a run of `?` followed by
/// whitespace or end of text counts once.
pub fn count_questions(text: &str) -> usize {
    let chars: Vec<char> = text.chars().collect();
    let mut count = 0;
    let mut i = 0;
    while i < chars.len() {
        if chars[i] == '?' {
            let mut end = i;
            while end + 1 < chars.len() && chars[end + 1] == '?' {
                end += 1;
            }
            match chars.get(end + 1) {
                None => count += 1,
                Some(c) if c.is_whitespace() => count += 1,
                Some(_) => {}
            }
            i = end + 1;
        } else {
            i += 1;
        }
    }
    count
}

pub fn validate_examiner_turn(text: &str) -> GuardVerdict {
    let question_count = count_questions(text);
    let (outcome, reason) = if text.trim().is_empty() {
        (GuardOutcome::Reject, GuardReason::Empty)
    } else if question_count > 1 {
        (GuardOutcome::Reject, GuardReason::MultiQuestion)
    } else {
        (GuardOutcome::Accept, GuardReason::None)
    };
    GuardVerdict {
        outcome,
        reason,
        question_count,
    }
}

/// Truncates `text` after its first sentence-terminal question mark.
///
/// Returns `None` when the text contains no such question.
pub fn first_question(text: &str) -> Option<String> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].1 == '?' {
            let mut end = i;
            while end + 1 < chars.len() && chars[end + 1].1 == '?' {
                end += 1;
            }
            let terminal = chars.get(end + 1).map_or(true, |(_, c)| c.is_whitespace());
            if terminal {
                let cut = chars[end].0 + 1;
                return Some(text[..cut].trim().to_string());
            }
            i = end + 1;
        } else {
            i += 1;
        }
    }
    None
}

/// Lower-cases and strips punctuation other than apostrophes, collapsing whitespace.
pub fn normalize_utterance(text: &str) -> String {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| match c {
            '\u{2019}' | '\u{2018}' => '\'',
            c if c.is_alphanumeric() || c == '\'' => c,
            _ => ' ',
        })
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, thiserror::Error)]
pub enum PatternError {
    #[error("pattern line {line}: {source}")]
    Regex {
        line: usize,
        #[source]
        source: regex::Error,
    },
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Clarification phrase set. One regular expression per line, matched
/// against the normalized utterance; `#` starts a comment line.
#[derive(Debug, Clone)]
pub struct ClarificationPatterns {
    patterns: Vec<Regex>,
}

impl ClarificationPatterns {
    pub fn parse(source: &str) -> Result<Self, PatternError> {
        let mut patterns = Vec::new();
        for (i, line) in source.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let regex = Regex::new(line).map_err(|source| PatternError::Regex { line: i + 1, source })?;
            patterns.push(regex);
        }
        Ok(Self { patterns })
    }

    pub fn load(path: &Path) -> Result<Self, PatternError> {
        let source = std::fs::read_to_string(path).map_err(|source| PatternError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&source)
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn is_clarification_request(&self, student_text: &str) -> bool {
        let normalized = normalize_utterance(student_text);
        !normalized.is_empty() && self.patterns.iter().any(|p| p.is_match(&normalized))
    }
}

impl Default for ClarificationPatterns {
    fn default() -> Self {
        Self::parse(DEFAULT_CLARIFICATION_PATTERNS).expect("shipped clarification patterns compile")
    }
}

/// Checks `student_text` against the default shipped pattern set.
pub fn is_clarification_request(student_text: &str) -> bool {
    thread_local! {
        static DEFAULT: ClarificationPatterns = ClarificationPatterns::default();
    }
    DEFAULT.with(|p| p.is_clarification_request(student_text))
}

/// A pattern file that reloads itself when its modification time changes.
#[derive(Debug)]
pub struct PatternFile {
    path: PathBuf,
    state: RwLock<(Option<SystemTime>, ClarificationPatterns)>,
}

impl PatternFile {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, PatternError> {
        let path = path.into();
        let patterns = ClarificationPatterns::load(&path)?;
        let mtime = modified(&path);
        Ok(Self {
            path,
            state: RwLock::new((mtime, patterns)),
        })
    }

    /// Reloads when the file changed on disk. A file that fails to parse
    /// leaves the previous pattern set in place and returns the error.
    pub fn reload_if_changed(&self) -> Result<bool, PatternError> {
        let current = modified(&self.path);
        {
            let guard = self.state.read().expect("pattern lock poisoned");
            if guard.0 == current {
                return Ok(false);
            }
        }
        let patterns = ClarificationPatterns::load(&self.path)?;
        let mut guard = self.state.write().expect("pattern lock poisoned");
        *guard = (current, patterns);
        Ok(true)
    }

    pub fn snapshot(&self) -> ClarificationPatterns {
        if let Err(err) = self.reload_if_changed() {
            tracing::warn!(path = %self.path.display(), %err, "keeping previous clarification patterns");
        }
        self.state.read().expect("pattern lock poisoned").1.clone()
    }
}

fn modified(path: &Path) -> Option<SystemTime> {
    std::fs::metadata(path).and_then(|m| m.modified()).ok()
}

/// Re-poses the pending question byte-for-byte. Never calls a backend.
///
/// With no pending question a system note is logged instead and `None`
/// is returned.
pub fn replay_pending(state: &mut SessionState, now_ms: u64) -> Option<Turn> {
    match state.pending_question.clone() {
        Some(question) => {
            let turn = state.push_turn(Role::Examiner, question, now_ms, [Annotation::VerbatimRepeat]);
            Some(turn)
        }
        None => {
            state.push_turn(
                Role::System,
                "clarification requested but no question is pending".to_string(),
                now_ms,
                [],
            );
            None
        }
    }
}

/// Marks every examiner turn that stacks two or more questions.
pub fn annotate_stacked_turns(mut transcript: Transcript) -> Transcript {
    for turn in &mut transcript.turns {
        if turn.role == Role::Examiner && count_questions(&turn.text) >= 2 {
            turn.annotations.insert(Annotation::StackedQuestion);
        }
    }
    transcript
}
