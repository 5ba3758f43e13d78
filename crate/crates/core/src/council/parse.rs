//! Parsing model output into assessments.
//!
//! Models answer with prose plus one fenced JSON block:
//!
//! ````text
//! ```json
//! {"scores": [{"dimension_id": "...", "score": 3, "justification": "...", "evidence": ["..."]}],
//!  "total": 15,
//!  "feedback": {"strengths": [...], "weaknesses": [...], "action_items": [...]}}
//! ```
//! ````
//!
//! Prose outside the block becomes the assessment's notes. The stated total
//! is advisory: scores are authoritative and a mismatching total is
//! recomputed with a warning.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::model::{Assessment, DimensionScore, FeedbackItem, FeedbackReport, Round, Rubric, SCALE_MAX};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseErrorCode {
    MissingBlock,
    InvalidJson,
    InvalidSchema,
    UnknownDimension,
    MissingDimension,
    DuplicateDimension,
    ScoreOutOfRange,
    MissingEvidence,
    MissingFeedback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseError {
    pub code: ParseErrorCode,
    pub detail: String,
}

impl ParseError {
    fn new(code: ParseErrorCode, detail: impl Into<String>) -> Self {
        Self {
            code,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.code, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedOutput {
    pub assessment: Assessment,
    /// Present for chair output.
    pub feedback: Option<FeedbackReport>,
    pub warnings: Vec<String>,
}

/// One model reply and what became of it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawModelOutput {
    pub rater_id: String,
    pub round: Round,
    pub raw: String,
    pub parsed: Option<Assessment>,
    pub parse_errors: Vec<ParseError>,
}

/// Splits out the first fenced block, preferring one tagged `json`.
/// Returns `(block, prose outside the block)`.
fn extract_block(raw: &str) -> Option<(&str, String)> {
    let mut fences = Vec::new();
    let mut search = 0;
    while let Some(pos) = raw[search..].find("```") {
        fences.push(search + pos);
        search += pos + 3;
    }
    let pairs: Vec<(usize, usize)> = fences.chunks(2).filter(|c| c.len() == 2).map(|c| (c[0], c[1])).collect();
    let tagged = |open: usize| {
        let info = raw[open + 3..].lines().next().unwrap_or("").trim().to_ascii_lowercase();
        info == "json"
    };
    let (open, close) = pairs
        .iter()
        .copied()
        .find(|&(o, _)| tagged(o))
        .or_else(|| pairs.first().copied())?;
    let body_start = raw[open + 3..].find('\n').map_or(open + 3, |n| open + 3 + n + 1);
    let body = raw.get(body_start..close).unwrap_or("");
    let prose = format!("{}\n{}", raw[..open].trim(), raw[close + 3..].trim());
    Some((body, prose.trim().to_string()))
}

fn string_list(value: Option<&Value>) -> Result<Vec<String>, ()> {
    match value {
        None | Some(Value::Null) => Ok(vec![]),
        Some(Value::String(s)) => Ok(vec![s.clone()]),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| v.as_str().map(str::to_string).ok_or(()))
            .collect(),
        Some(_) => Err(()),
    }
}

fn feedback_items(value: Option<&Value>, field: &str, errors: &mut Vec<ParseError>) -> Vec<FeedbackItem> {
    let Some(items) = value.and_then(Value::as_array) else {
        if value.is_some_and(|v| !v.is_null()) {
            errors.push(ParseError::new(ParseErrorCode::InvalidSchema, format!("feedback.{field} must be a list")));
        }
        return vec![];
    };
    let mut out = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let claim = item.get("claim").and_then(Value::as_str).unwrap_or("").trim().to_string();
        let evidence = item.get("evidence").and_then(Value::as_str).unwrap_or("").trim().to_string();
        if claim.is_empty() {
            errors.push(ParseError::new(
                ParseErrorCode::InvalidSchema,
                format!("feedback.{field}[{i}].claim missing"),
            ));
        }
        if evidence.is_empty() {
            errors.push(ParseError::new(
                ParseErrorCode::MissingEvidence,
                format!("feedback.{field}[{i}].evidence missing"),
            ));
        }
        out.push(FeedbackItem { claim, evidence });
    }
    out
}

fn parse_feedback(value: Option<&Value>, errors: &mut Vec<ParseError>) -> Option<FeedbackReport> {
    let Some(obj) = value.and_then(Value::as_object) else {
        errors.push(ParseError::new(ParseErrorCode::MissingFeedback, "chair output needs a feedback object"));
        return None;
    };
    let strengths = feedback_items(obj.get("strengths"), "strengths", errors);
    let weaknesses = feedback_items(obj.get("weaknesses"), "weaknesses", errors);
    let action_items = string_list(obj.get("action_items")).unwrap_or_else(|()| {
        errors.push(ParseError::new(ParseErrorCode::InvalidSchema, "feedback.action_items must be strings"));
        vec![]
    });
    Some(FeedbackReport {
        strengths,
        weaknesses,
        action_items,
    })
}

/// Parses one model reply against `rubric`. All problems found are
/// reported together.
pub fn parse_assessment(raw: &str, rubric: &Rubric, rater_id: &str, round: Round) -> Result<ParsedOutput, Vec<ParseError>> {
    let Some((block, notes)) = extract_block(raw) else {
        return Err(vec![ParseError::new(ParseErrorCode::MissingBlock, "no fenced JSON block found")]);
    };
    let value: Value = serde_json::from_str(block)
        .map_err(|e| vec![ParseError::new(ParseErrorCode::InvalidJson, e.to_string())])?;
    let Some(scores) = value.get("scores").and_then(Value::as_array) else {
        return Err(vec![ParseError::new(ParseErrorCode::InvalidSchema, "`scores` must be a list")]);
    };

    let mut errors = Vec::new();
    let mut by_dimension: BTreeMap<usize, DimensionScore> = BTreeMap::new();
    for (i, entry) in scores.iter().enumerate() {
        let Some(dimension_id) = entry.get("dimension_id").and_then(Value::as_str) else {
            errors.push(ParseError::new(
                ParseErrorCode::InvalidSchema,
                format!("scores[{i}].dimension_id missing"),
            ));
            continue;
        };
        let Some(position) = rubric.position(dimension_id) else {
            errors.push(ParseError::new(ParseErrorCode::UnknownDimension, dimension_id.to_string()));
            continue;
        };
        let score = match entry.get("score").and_then(Value::as_i64) {
            Some(s) if (0..=i64::from(SCALE_MAX)).contains(&s) => s as u8,
            Some(s) => {
                errors.push(ParseError::new(
                    ParseErrorCode::ScoreOutOfRange,
                    format!("{dimension_id}: {s} is outside 0-{SCALE_MAX}"),
                ));
                continue;
            }
            None => {
                errors.push(ParseError::new(
                    ParseErrorCode::InvalidSchema,
                    format!("{dimension_id}: score must be an integer"),
                ));
                continue;
            }
        };
        let justification = entry
            .get("justification")
            .and_then(Value::as_str)
            .unwrap_or("")
            .trim()
            .to_string();
        let evidence: Vec<String> = match string_list(entry.get("evidence")) {
            Ok(list) => list.into_iter().map(|q| q.trim().to_string()).filter(|q| !q.is_empty()).collect(),
            Err(()) => {
                errors.push(ParseError::new(
                    ParseErrorCode::InvalidSchema,
                    format!("{dimension_id}: evidence must be a list of strings"),
                ));
                continue;
            }
        };
        if round == Round::Chair && evidence.is_empty() {
            errors.push(ParseError::new(
                ParseErrorCode::MissingEvidence,
                format!("{dimension_id}: chair scores need verbatim evidence"),
            ));
        }
        let previous = by_dimension.insert(
            position,
            DimensionScore {
                dimension_id: dimension_id.to_string(),
                score,
                justification,
                evidence,
            },
        );
        if previous.is_some() {
            errors.push(ParseError::new(ParseErrorCode::DuplicateDimension, dimension_id.to_string()));
        }
    }
    for (position, dim) in rubric.dimensions.iter().enumerate() {
        if !by_dimension.contains_key(&position) && !errors.iter().any(|e| e.detail.starts_with(&dim.id)) {
            errors.push(ParseError::new(ParseErrorCode::MissingDimension, dim.id.clone()));
        }
    }

    let feedback = if round == Round::Chair {
        parse_feedback(value.get("feedback"), &mut errors)
    } else {
        None
    };
    if !errors.is_empty() {
        return Err(errors);
    }

    let scores: Vec<DimensionScore> = by_dimension.into_values().collect();
    let total: u32 = scores.iter().map(|s| u32::from(s.score)).sum();
    let mut warnings = Vec::new();
    match value.get("total") {
        None | Some(Value::Null) => {}
        Some(stated) if stated.as_u64() == Some(u64::from(total)) => {}
        Some(stated) => warnings.push(format!(
            "{rater_id} {round}: stated total {stated} replaced by the sum of scores {total}"
        )),
    }
    Ok(ParsedOutput {
        assessment: Assessment {
            rater_id: rater_id.to_string(),
            round,
            scores,
            total: total as u8,
            notes,
        },
        feedback,
        warnings,
    })
}

/// Renders an assessment in the fenced format `parse_assessment` reads.
pub fn render_block(assessment: &Assessment, feedback: Option<&FeedbackReport>) -> String {
    let mut value = serde_json::json!({
        "scores": assessment.scores,
        "total": assessment.total,
    });
    if let Some(feedback) = feedback {
        value["feedback"] = serde_json::to_value(feedback).expect("feedback serializes");
    }
    format!(
        "```json\n{}\n```",
        serde_json::to_string_pretty(&value).expect("assessment serializes")
    )
}
