//! Verbatim-evidence checks.
//!
//! A quote verifies iff its whitespace-normalized form is a substring of
//! the whitespace-normalized concatenation of all turn texts.

use crate::model::{Assessment, FeedbackReport, Transcript};

pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Surrounding quotation marks are not part of the quote.
fn strip_quote_marks(quote: &str) -> &str {
    quote
        .trim()
        .trim_matches(|c| matches!(c, '"' | '\u{201c}' | '\u{201d}' | '\''))
        .trim()
}

/// The normalized text that quotes are checked against.
#[derive(Debug, Clone)]
pub struct EvidenceCorpus {
    normalized: String,
}

impl EvidenceCorpus {
    pub fn from_transcript(transcript: &Transcript) -> Self {
        let joined = transcript
            .turns
            .iter()
            .map(|t| t.text.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        Self {
            normalized: normalize_whitespace(&joined),
        }
    }

    pub fn verifies(&self, quote: &str) -> bool {
        let needle = normalize_whitespace(strip_quote_marks(quote));
        !needle.is_empty() && self.normalized.contains(&needle)
    }

    /// Finds the normalized quote within the normalized corpus.
    pub fn locate(&self, quote: &str) -> Option<std::ops::Range<usize>> {
        let needle = normalize_whitespace(strip_quote_marks(quote));
        if needle.is_empty() {
            return None;
        }
        self.normalized.find(&needle).map(|start| start..start + needle.len())
    }
}

/// Returns the quotes that do not verify, in input order.
pub fn verify_evidence<'a, I>(quotes: I, transcript: &Transcript) -> Vec<String>
where
    I: IntoIterator<Item = &'a str>,
{
    let corpus = EvidenceCorpus::from_transcript(transcript);
    quotes
        .into_iter()
        .filter(|q| !corpus.verifies(q))
        .map(str::to_string)
        .collect()
}

/// Unverifiable quotes in an assessment, as `(dimension_id, quote)`.
pub fn unverified_in_assessment(assessment: &Assessment, transcript: &Transcript) -> Vec<(String, String)> {
    let corpus = EvidenceCorpus::from_transcript(transcript);
    assessment
        .scores
        .iter()
        .flat_map(|s| s.evidence.iter().map(move |q| (s.dimension_id.clone(), q)))
        .filter(|(_, q)| !corpus.verifies(q))
        .map(|(d, q)| (d, q.clone()))
        .collect()
}

/// Unverifiable feedback quotes, as `(location, quote)`.
pub fn unverified_in_feedback(feedback: &FeedbackReport, transcript: &Transcript) -> Vec<(String, String)> {
    let corpus = EvidenceCorpus::from_transcript(transcript);
    feedback
        .quotes()
        .into_iter()
        .filter(|(_, q)| !corpus.verifies(q))
        .map(|(loc, q)| (loc, q.to_string()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Phase, Role, StudentContext, Termination, Turn};

    fn transcript(texts: &[(Role, &str)]) -> Transcript {
        Transcript {
            session_id: "s".into(),
            student: StudentContext {
                student_id: "x".into(),
                display_name: "X".into(),
                project_summary: "p".into(),
                extra_vars: Default::default(),
            },
            case: None,
            case_index: None,
            seed: None,
            turns: texts
                .iter()
                .enumerate()
                .map(|(i, (role, text))| Turn {
                    index: i as u32,
                    role: *role,
                    phase: Phase::Project,
                    text: text.to_string(),
                    timestamp_ms: 0,
                    annotations: Default::default(),
                })
                .collect(),
            started_at_ms: 0,
            ended_at_ms: 0,
            termination: Termination::Completed,
        }
    }

    #[test]
    fn copied_quote_verifies() {
        let t = transcript(&[(Role::Student, "We would  track weekly\nretention as the north star.")]);
        assert!(verify_evidence(["track weekly retention"], &t).is_empty());
        assert!(verify_evidence(["\u{201c}track weekly retention\u{201d}"], &t).is_empty());
    }

    #[test]
    fn paraphrase_fails() {
        let t = transcript(&[(Role::Student, "We would track weekly retention.")]);
        assert_eq!(verify_evidence(["track monthly retention"], &t), ["track monthly retention"]);
        assert_eq!(verify_evidence([""], &t).len(), 1);
    }

    #[test]
    fn quote_spanning_adjacent_turns() {
        let t = transcript(&[
            (Role::Student, "The user is the loan officer."),
            (Role::Student, "They decide whether to approve."),
        ]);
        let quote = "loan officer. They decide";
        // oracle: direct substring check on the normalized corpus
        let corpus = normalize_whitespace("The user is the loan officer. They decide whether to approve.");
        assert!(corpus.contains(quote));
        assert!(verify_evidence([quote], &t).is_empty());
    }
}
