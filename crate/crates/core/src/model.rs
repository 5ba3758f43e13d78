//! Shared domain types and their canonical JSON encoding.
//!
//! Every file-level entity is written as pretty-printed JSON with
//! lexicographically sorted object keys and a top-level `"v": 1` schema
//! version. Decoding rejects unknown fields and re-checks every invariant,
//! so a file that loads is a file that could have been written.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Schema version written into every canonical document.
pub const SCHEMA_VERSION: u64 = 1;
/// Number of rubric dimensions.
pub const DIMENSION_COUNT: usize = 5;
/// Highest score on a single dimension.
pub const SCALE_MAX: u8 = 4;
/// Highest total score.
pub const TOTAL_MAX: u8 = SCALE_MAX * DIMENSION_COUNT as u8;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("schema violation at `{field}`: {message}")]
    Schema { field: String, message: String },
    #[error("malformed JSON: {0}")]
    Json(String),
}

impl ModelError {
    pub fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Schema {
            field: field.into(),
            message: message.into(),
        }
    }

    /// The offending field, when the error is a schema violation.
    pub fn field(&self) -> Option<&str> {
        match self {
            Self::Schema { field, .. } => Some(field),
            Self::Json(_) => None,
        }
    }
}

/// Invariant check shared by every persisted entity.
pub trait Validate {
    fn validate(&self) -> Result<(), ModelError>;
}

/// Encodes `value` as canonical JSON bytes (sorted keys, `"v": 1`, trailing newline).
pub fn to_canonical_json<T: Serialize + Validate>(value: &T) -> Result<Vec<u8>, ModelError> {
    value.validate()?;
    let mut tree = serde_json::to_value(value).map_err(|e| ModelError::Json(e.to_string()))?;
    match &mut tree {
        Value::Object(map) => {
            map.insert("v".to_string(), Value::from(SCHEMA_VERSION));
        }
        _ => return Err(ModelError::schema("$", "top-level entity must be an object")),
    }
    let mut out = serde_json::to_vec_pretty(&sort_keys(tree)).map_err(|e| ModelError::Json(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

/// Decodes canonical JSON, rejecting unknown fields and invariant violations.
pub fn from_canonical_json<T: DeserializeOwned + Validate>(bytes: &[u8]) -> Result<T, ModelError> {
    let tree: Value = serde_json::from_slice(bytes).map_err(|e| ModelError::Json(e.to_string()))?;
    let Value::Object(mut map) = tree else {
        return Err(ModelError::schema("$", "top-level entity must be an object"));
    };
    match map.remove("v") {
        Some(Value::Number(n)) if n.as_u64() == Some(SCHEMA_VERSION) => {}
        Some(other) => {
            return Err(ModelError::schema(
                "v",
                format!("unsupported schema version {other}"),
            ))
        }
        None => return Err(ModelError::schema("v", "missing schema version")),
    }
    let value: T = serde_path_to_error::deserialize(Value::Object(map)).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner().to_string();
        let field = if path == "." {
            backticked(&inner).unwrap_or_else(|| "$".to_string())
        } else {
            path
        };
        ModelError::schema(field, inner)
    })?;
    value.validate()?;
    Ok(value)
}

/// serde reports missing/unknown top-level fields as "missing field `x`".
fn backticked(message: &str) -> Option<String> {
    let start = message.find('`')? + 1;
    let end = start + message[start..].find('`')?;
    Some(message[start..end].to_string())
}

fn sort_keys(value: Value) -> Value {
    match value {
        Value::Object(map) => {
            let sorted: BTreeMap<String, Value> = map.into_iter().map(|(k, v)| (k, sort_keys(v))).collect();
            Value::Object(sorted.into_iter().collect::<Map<String, Value>>())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

fn require_non_empty(field: &str, value: &str) -> Result<(), ModelError> {
    if value.trim().is_empty() {
        Err(ModelError::schema(field, "must be non-empty"))
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExamCase {
    pub id: String,
    pub title: String,
    #[serde(default)]
    pub topic_tags: Vec<String>,
    /// Short background handed to the case examiner.
    #[serde(default)]
    pub brief: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentContext {
    pub student_id: String,
    pub display_name: String,
    pub project_summary: String,
    #[serde(default)]
    pub extra_vars: BTreeMap<String, String>,
}

impl Validate for StudentContext {
    fn validate(&self) -> Result<(), ModelError> {
        require_non_empty("student_id", &self.student_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Examiner,
    Student,
    System,
}

/// Examination phase. Ordering follows the examination sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Auth,
    Project,
    Case,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Auth => "auth",
            Phase::Project => "project",
            Phase::Case => "case",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Annotation {
    StackedQuestion,
    VerbatimRepeat,
    SilenceNudge,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Turn {
    pub index: u32,
    pub role: Role,
    pub phase: Phase,
    pub text: String,
    pub timestamp_ms: u64,
    #[serde(default)]
    pub annotations: BTreeSet<Annotation>,
}

impl Turn {
    pub fn has(&self, annotation: Annotation) -> bool {
        self.annotations.contains(&annotation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Completed,
    AuthFailed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transcript {
    pub session_id: String,
    pub student: StudentContext,
    pub case: Option<ExamCase>,
    /// Position of `case` within the eligible catalog at session start.
    pub case_index: Option<usize>,
    /// Seed used for case selection.
    pub seed: Option<u64>,
    pub turns: Vec<Turn>,
    pub started_at_ms: u64,
    pub ended_at_ms: u64,
    pub termination: Termination,
}

impl Transcript {
    pub fn duration_ms(&self) -> u64 {
        self.ended_at_ms.saturating_sub(self.started_at_ms)
    }

    pub fn examiner_turns(&self) -> impl Iterator<Item = &Turn> {
        self.turns.iter().filter(|t| t.role == Role::Examiner)
    }
}

/// Checks the per-turn invariants on a turn sequence.
pub fn validate_turns(turns: &[Turn]) -> Result<(), ModelError> {
    let mut last_phase = Phase::Auth;
    for (position, turn) in turns.iter().enumerate() {
        if turn.index as usize != position {
            return Err(ModelError::schema(
                format!("turns[{position}].index"),
                format!("expected index {position}, found {}", turn.index),
            ));
        }
        if turn.role != Role::System && turn.text.trim().is_empty() {
            return Err(ModelError::schema(
                format!("turns[{position}].text"),
                "examiner and student turns must have text",
            ));
        }
        if turn.phase < last_phase {
            return Err(ModelError::schema(
                format!("turns[{position}].phase"),
                format!("phase {} follows phase {}", turn.phase, last_phase),
            ));
        }
        last_phase = turn.phase;
    }
    Ok(())
}

impl Validate for Transcript {
    fn validate(&self) -> Result<(), ModelError> {
        require_non_empty("session_id", &self.session_id)?;
        self.student
            .validate()
            .map_err(|e| prefix("student", e))?;
        validate_turns(&self.turns)?;
        if self.ended_at_ms < self.started_at_ms {
            return Err(ModelError::schema("ended_at_ms", "ends before it starts"));
        }
        Ok(())
    }
}

fn prefix(parent: &str, err: ModelError) -> ModelError {
    match err {
        ModelError::Schema { field, message } => ModelError::Schema {
            field: format!("{parent}.{field}"),
            message,
        },
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RubricDimension {
    pub id: String,
    pub name: String,
    pub description: String,
    /// Anchor text for each integer score 0..=4.
    pub anchors: BTreeMap<u8, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rubric {
    pub dimensions: Vec<RubricDimension>,
    pub interference_protocol: String,
    pub scale_max: u8,
}

impl Rubric {
    pub fn dimension_ids(&self) -> impl Iterator<Item = &str> {
        self.dimensions.iter().map(|d| d.id.as_str())
    }

    pub fn position(&self, dimension_id: &str) -> Option<usize> {
        self.dimensions.iter().position(|d| d.id == dimension_id)
    }

    /// The five-dimension product-management rubric shipped as `rubric.json`.
    pub fn standard() -> Self {
        fn dim(id: &str, name: &str, description: &str, anchors: [&str; 5]) -> RubricDimension {
            RubricDimension {
                id: id.to_string(),
                name: name.to_string(),
                description: description.to_string(),
                anchors: anchors
                    .iter()
                    .enumerate()
                    .map(|(score, text)| (score as u8, text.to_string()))
                    .collect(),
            }
        }
        Rubric {
            dimensions: vec![
                dim(
                    "problem_framing",
                    "Problem Framing",
                    "Identifies the user, the decision being improved, and why the problem matters.",
                    [
                        "No identifiable user or problem.",
                        "Vague problem statement; user or decision unclear.",
                        "User and problem identified but the decision being changed is fuzzy.",
                        "Clear user, problem and decision with minor gaps.",
                        "Crisp framing of user, decision and value, defended under follow-up.",
                    ],
                ),
                dim(
                    "metrics_economics",
                    "Metrics & Economics",
                    "Chooses success metrics, counter metrics and reasons about costs of errors.",
                    [
                        "No metric offered.",
                        "Names a generic metric without connection to the decision.",
                        "Reasonable primary metric; no counter metric or cost reasoning.",
                        "Primary and counter metric with some reasoning about error costs.",
                        "Metric system tied to economics of false positives and negatives, including gaming risks.",
                    ],
                ),
                dim(
                    "risk_ethics",
                    "Risk & Ethics",
                    "Anticipates failure modes, bias, privacy and misuse risks and proposes mitigations.",
                    [
                        "No risks identified.",
                        "Mentions risk in generic terms only.",
                        "Identifies a relevant risk without mitigation.",
                        "Relevant risks with plausible mitigations.",
                        "Specific risks, affected groups and monitored mitigations.",
                    ],
                ),
                dim(
                    "experimentation",
                    "Experimentation",
                    "Designs experiments: hypothesis, randomization unit, guardrails and decision criteria.",
                    [
                        "Unable to discuss experimentation.",
                        "Superficial mention of A/B testing.",
                        "Basic test design missing randomization unit or decision criteria.",
                        "Sound design with hypothesis, unit and success criteria.",
                        "Complete design including guardrail metrics and ship or rollback criteria.",
                    ],
                ),
                dim(
                    "communication",
                    "Communication",
                    "Answers directly, structures reasoning and stays consistent under follow-up.",
                    [
                        "Unintelligible or non-responsive.",
                        "Rambling; rarely answers the question asked.",
                        "Understandable but loosely structured.",
                        "Clear and mostly structured answers.",
                        "Concise, structured and consistent throughout.",
                    ],
                ),
            ],
            interference_protocol: "INTERFERENCE PROTOCOL: Some examiner turns are marked [STACKED QUESTION]. \
When the examiner asked several questions in one turn and the student answered only some of them, \
assess only what the student actually answered. Do not penalize the student for the unanswered parts \
of a stacked question."
                .to_string(),
            scale_max: SCALE_MAX,
        }
    }
}

impl Validate for Rubric {
    fn validate(&self) -> Result<(), ModelError> {
        if self.scale_max != SCALE_MAX {
            return Err(ModelError::schema("scale_max", format!("must be {SCALE_MAX}")));
        }
        if self.dimensions.len() != DIMENSION_COUNT {
            return Err(ModelError::schema(
                "dimensions",
                format!("expected {DIMENSION_COUNT} dimensions, found {}", self.dimensions.len()),
            ));
        }
        let mut seen = BTreeSet::new();
        for (i, dim) in self.dimensions.iter().enumerate() {
            require_non_empty(&format!("dimensions[{i}].id"), &dim.id)?;
            if !seen.insert(dim.id.as_str()) {
                return Err(ModelError::schema(format!("dimensions[{i}].id"), "duplicate dimension id"));
            }
            for score in 0..=SCALE_MAX {
                match dim.anchors.get(&score) {
                    Some(text) if !text.trim().is_empty() => {}
                    _ => {
                        return Err(ModelError::schema(
                            format!("dimensions[{i}].anchors.{score}"),
                            "missing anchor text",
                        ))
                    }
                }
            }
            if dim.anchors.len() != SCALE_MAX as usize + 1 {
                return Err(ModelError::schema(
                    format!("dimensions[{i}].anchors"),
                    "anchors outside the 0-4 scale",
                ));
            }
        }
        require_non_empty("interference_protocol", &self.interference_protocol)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimensionScore {
    pub dimension_id: String,
    pub score: u8,
    #[serde(default)]
    pub justification: String,
    #[serde(default)]
    pub evidence: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Round {
    #[serde(rename = "r1")]
    R1,
    #[serde(rename = "r2")]
    R2,
    #[serde(rename = "chair")]
    Chair,
}

impl Round {
    pub fn as_str(self) -> &'static str {
        match self {
            Round::R1 => "r1",
            Round::R2 => "r2",
            Round::Chair => "chair",
        }
    }
}

impl fmt::Display for Round {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Assessment {
    pub rater_id: String,
    pub round: Round,
    pub scores: Vec<DimensionScore>,
    pub total: u8,
    #[serde(default)]
    pub notes: String,
}

impl Assessment {
    pub fn score_for(&self, dimension_id: &str) -> Option<u8> {
        self.scores
            .iter()
            .find(|s| s.dimension_id == dimension_id)
            .map(|s| s.score)
    }

    pub fn sum_of_scores(&self) -> u32 {
        self.scores.iter().map(|s| u32::from(s.score)).sum()
    }

    /// Checks that the scores cover exactly the rubric's dimensions.
    pub fn validate_against(&self, rubric: &Rubric) -> Result<(), ModelError> {
        self.validate()?;
        let expected: BTreeSet<&str> = rubric.dimension_ids().collect();
        let actual: BTreeSet<&str> = self.scores.iter().map(|s| s.dimension_id.as_str()).collect();
        if expected != actual {
            return Err(ModelError::schema(
                "scores",
                "dimension ids do not match the rubric",
            ));
        }
        Ok(())
    }
}

impl Validate for Assessment {
    fn validate(&self) -> Result<(), ModelError> {
        require_non_empty("rater_id", &self.rater_id)?;
        if self.scores.len() != DIMENSION_COUNT {
            return Err(ModelError::schema(
                "scores",
                format!("expected {DIMENSION_COUNT} dimension scores, found {}", self.scores.len()),
            ));
        }
        let mut seen = BTreeSet::new();
        for (i, score) in self.scores.iter().enumerate() {
            require_non_empty(&format!("scores[{i}].dimension_id"), &score.dimension_id)?;
            if !seen.insert(score.dimension_id.as_str()) {
                return Err(ModelError::schema(
                    format!("scores[{i}].dimension_id"),
                    "duplicate dimension",
                ));
            }
            if score.score > SCALE_MAX {
                return Err(ModelError::schema(
                    format!("scores[{i}].score"),
                    format!("{} is outside 0-{SCALE_MAX}", score.score),
                ));
            }
            if self.round == Round::Chair && score.evidence.iter().all(|q| q.trim().is_empty()) {
                return Err(ModelError::schema(
                    format!("scores[{i}].evidence"),
                    "chair scores require evidence",
                ));
            }
        }
        let sum = self.sum_of_scores();
        if u32::from(self.total) != sum {
            return Err(ModelError::schema(
                "total",
                format!("total {} does not equal the sum of scores {sum}", self.total),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackItem {
    pub claim: String,
    pub evidence: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackReport {
    #[serde(default)]
    pub strengths: Vec<FeedbackItem>,
    #[serde(default)]
    pub weaknesses: Vec<FeedbackItem>,
    #[serde(default)]
    pub action_items: Vec<String>,
}

impl FeedbackReport {
    /// All evidence quotes, labelled by where they appear.
    pub fn quotes(&self) -> Vec<(String, &str)> {
        let strengths = self
            .strengths
            .iter()
            .enumerate()
            .map(|(i, item)| (format!("strengths[{i}]"), item.evidence.as_str()));
        let weaknesses = self
            .weaknesses
            .iter()
            .enumerate()
            .map(|(i, item)| (format!("weaknesses[{i}]"), item.evidence.as_str()));
        strengths.chain(weaknesses).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagKind {
    DimensionDisagreement,
    OverallDivergence,
    ParseFailure,
    UnverifiedEvidence,
}

impl FlagKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FlagKind::DimensionDisagreement => "dimension_disagreement",
            FlagKind::OverallDivergence => "overall_divergence",
            FlagKind::ParseFailure => "parse_failure",
            FlagKind::UnverifiedEvidence => "unverified_evidence",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Flag {
    pub kind: FlagKind,
    pub detail: String,
    pub threshold_value: f64,
}

impl Flag {
    pub fn new(kind: FlagKind, detail: impl Into<String>, threshold_value: f64) -> Self {
        Self {
            kind,
            detail: detail.into(),
            threshold_value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouncilResult {
    pub transcript_ref: String,
    pub round1: Vec<Assessment>,
    pub round2: Vec<Assessment>,
    pub chair: Assessment,
    pub feedback: FeedbackReport,
    #[serde(default)]
    pub flags: Vec<Flag>,
    /// Non-fatal parser notes, e.g. a recomputed total.
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl CouncilResult {
    pub fn is_flagged(&self) -> bool {
        !self.flags.is_empty()
    }
}

fn validate_round(field: &str, items: &[Assessment], round: Round) -> Result<BTreeSet<String>, ModelError> {
    if items.len() < 2 {
        return Err(ModelError::schema(field, "a council needs at least two raters"));
    }
    let mut raters = BTreeSet::new();
    for (i, a) in items.iter().enumerate() {
        a.validate().map_err(|e| prefix(&format!("{field}[{i}]"), e))?;
        if a.round != round {
            return Err(ModelError::schema(format!("{field}[{i}].round"), format!("expected {round}")));
        }
        if !raters.insert(a.rater_id.clone()) {
            return Err(ModelError::schema(format!("{field}[{i}].rater_id"), "duplicate rater"));
        }
    }
    Ok(raters)
}

impl Validate for CouncilResult {
    fn validate(&self) -> Result<(), ModelError> {
        require_non_empty("transcript_ref", &self.transcript_ref)?;
        let first = validate_round("round1", &self.round1, Round::R1)?;
        let second = validate_round("round2", &self.round2, Round::R2)?;
        if first != second {
            return Err(ModelError::schema("round2", "rater set differs from round1"));
        }
        if self.chair.round != Round::Chair {
            return Err(ModelError::schema("chair.round", "expected chair"));
        }
        self.chair.validate().map_err(|e| prefix("chair", e))
    }
}
