//! The grading council.
//!
//! Round 1: every rater scores the transcript alone. Round 2: every rater
//! sees the compiled Round 1 summary and revises or reaffirms. The chair
//! then produces the final grade and the student feedback.

mod evidence;
mod parse;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use evidence::{
    normalize_whitespace, unverified_in_assessment, unverified_in_feedback, verify_evidence, EvidenceCorpus,
};
pub use parse::{parse_assessment, render_block, ParseError, ParseErrorCode, ParsedOutput, RawModelOutput};

use crate::backend::{Backend, BackendError, BackendSpec, CaptureLog, CompletionRequest, Message, Usage, UsageEntry};
use crate::guard::annotate_stacked_turns;
use crate::model::{
    Assessment, CouncilResult, FeedbackReport, Flag, FlagKind, Role, Round, Rubric, Transcript, Validate,
};
use crate::reliability::{flag_assessments, FlagThresholds};
use crate::template::{PromptTemplate, TemplateError};

pub const STACKED_MARKER: &str = "[STACKED QUESTION]";

const FORMAT_REMINDER: &str = "Your previous reply could not be used. End your reply with exactly one fenced \
```json block containing one score entry per rubric dimension (integer 0-4, justification, verbatim \
evidence quotes) and the total.";

/// One council member.
#[derive(Clone)]
pub struct Rater {
    pub spec: BackendSpec,
    pub backend: Arc<dyn Backend>,
}

impl Rater {
    pub fn new(spec: BackendSpec, backend: Arc<dyn Backend>) -> Self {
        Self { spec, backend }
    }

    pub fn id(&self) -> &str {
        &self.spec.rater_id
    }
}

impl std::fmt::Debug for Rater {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Rater").field("rater_id", &self.spec.rater_id).finish()
    }
}

#[derive(Debug, Clone)]
pub struct GradingPrompts {
    pub round1: PromptTemplate,
    pub round2: PromptTemplate,
    pub chair: PromptTemplate,
}

impl GradingPrompts {
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        Ok(Self {
            round1: PromptTemplate::load(&dir.join("round1.txt"))?,
            round2: PromptTemplate::load(&dir.join("round2.txt"))?,
            chair: PromptTemplate::load(&dir.join("chair.txt"))?,
        })
    }
}

impl Default for GradingPrompts {
    fn default() -> Self {
        let t = |name: &str, src: &str| PromptTemplate::parse(name, src).expect("bundled grading prompt parses");
        Self {
            round1: t("round1", include_str!("../../../../prompts/grading/round1.txt")),
            round2: t("round2", include_str!("../../../../prompts/grading/round2.txt")),
            chair: t("chair", include_str!("../../../../prompts/grading/chair.txt")),
        }
    }
}

/// The transcript as graders see it. Stacked examiner turns carry a marker.
pub fn render_transcript(transcript: &Transcript) -> String {
    let mut out = String::new();
    for turn in &transcript.turns {
        let speaker = match turn.role {
            Role::Examiner => "EXAMINER",
            Role::Student => "STUDENT",
            Role::System => "SYSTEM",
        };
        let marker = if turn.has(crate::model::Annotation::StackedQuestion) {
            format!(" {STACKED_MARKER}")
        } else {
            String::new()
        };
        let _ = writeln!(out, "[{}] {speaker} ({}){marker}: {}", turn.index, turn.phase, turn.text);
    }
    out
}

pub fn render_rubric(rubric: &Rubric) -> String {
    let mut out = String::new();
    for dim in &rubric.dimensions {
        let _ = writeln!(out, "- {} ({}): {}", dim.id, dim.name, dim.description);
        for (score, anchor) in &dim.anchors {
            let _ = writeln!(out, "    {score}: {anchor}");
        }
    }
    let _ = write!(out, "\nINTERFERENCE PROTOCOL\n{}\n", rubric.interference_protocol);
    out
}

fn render_assessment(a: &Assessment) -> String {
    let mut out = format!("Rater {} ({}), total {}\n", a.rater_id, a.round, a.total);
    for s in &a.scores {
        let _ = writeln!(out, "  {}: {}", s.dimension_id, s.score);
        let _ = writeln!(out, "    justification: {}", s.justification);
        for q in &s.evidence {
            let _ = writeln!(out, "    evidence: \"{q}\"");
        }
    }
    out
}

fn render_assessments(items: &[Assessment]) -> String {
    items.iter().map(render_assessment).collect::<Vec<_>>().join("\n")
}

/// All Round 1 assessments, ordered by rater id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerSummary {
    pub entries: Vec<Assessment>,
}

impl PeerSummary {
    pub fn rater_ids(&self) -> Vec<&str> {
        self.entries.iter().map(|a| a.rater_id.as_str()).collect()
    }

    pub fn render(&self) -> String {
        render_assessments(&self.entries)
    }
}

pub fn compile_peer_summary(round1: &[Assessment]) -> PeerSummary {
    let mut entries = round1.to_vec();
    entries.sort_by(|a, b| a.rater_id.cmp(&b.rater_id));
    PeerSummary { entries }
}

#[derive(Debug, thiserror::Error)]
pub enum CouncilError {
    #[error("invalid council: {0}")]
    Config(String),
    #[error("prompt template: {0}")]
    Template(#[from] TemplateError),
    #[error("only {succeeded} Round 1 assessments succeeded; grading needs two")]
    InsufficientRaters { succeeded: usize, failures: Vec<String> },
    #[error("chair synthesis failed: {}", .errors.join("; "))]
    ChairFailed {
        errors: Vec<String>,
        partial: Box<PartialCouncil>,
    },
}

/// What was produced before an abort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialCouncil {
    pub transcript_ref: String,
    pub round1: Vec<Assessment>,
    pub round2: Vec<Assessment>,
    pub flags: Vec<Flag>,
}

/// A council result plus the artifacts behind it.
#[derive(Debug, Clone)]
pub struct CouncilOutcome {
    pub result: CouncilResult,
    pub raw_outputs: Vec<RawModelOutput>,
    pub usage: Vec<UsageEntry>,
}

/// One rater's attempt at a round, including a single reprompt.
struct Attempt {
    parsed: Option<ParsedOutput>,
    raw: Vec<RawModelOutput>,
    usage: Usage,
    failure: Option<String>,
}

#[derive(Debug)]
pub struct Council {
    raters: Vec<Rater>,
    chair: usize,
    rubric: Rubric,
    prompts: GradingPrompts,
    thresholds: FlagThresholds,
    capture: Option<CaptureLog>,
}

impl Council {
    pub fn new(raters: Vec<Rater>, rubric: Rubric) -> Result<Self, CouncilError> {
        let mut raters = raters;
        raters.sort_by(|a, b| a.spec.rater_id.cmp(&b.spec.rater_id));
        if raters.len() < 3 {
            return Err(CouncilError::Config("a council needs at least three raters".into()));
        }
        let mut families = std::collections::BTreeSet::new();
        for pair in raters.windows(2) {
            if pair[0].spec.rater_id == pair[1].spec.rater_id {
                return Err(CouncilError::Config(format!("duplicate rater `{}`", pair[0].spec.rater_id)));
            }
        }
        for r in &raters {
            if !families.insert(r.spec.family_label.as_str()) {
                return Err(CouncilError::Config(format!(
                    "family `{}` appears more than once",
                    r.spec.family_label
                )));
            }
        }
        let chairs: Vec<usize> = (0..raters.len()).filter(|&i| raters[i].spec.is_chair).collect();
        let [chair] = chairs[..] else {
            return Err(CouncilError::Config(format!("expected one chair, found {}", chairs.len())));
        };
        rubric.validate().map_err(|e| CouncilError::Config(e.to_string()))?;
        Ok(Self {
            raters,
            chair,
            rubric,
            prompts: GradingPrompts::default(),
            thresholds: FlagThresholds::default(),
            capture: None,
        })
    }

    pub fn with_prompts(mut self, prompts: GradingPrompts) -> Self {
        self.prompts = prompts;
        self
    }

    pub fn with_thresholds(mut self, thresholds: FlagThresholds) -> Self {
        self.thresholds = thresholds;
        self
    }

    pub fn with_capture(mut self, log: CaptureLog) -> Self {
        self.capture = Some(log);
        self
    }

    pub fn raters(&self) -> &[Rater] {
        &self.raters
    }

    pub fn rubric(&self) -> &Rubric {
        &self.rubric
    }

    fn call(&self, rater: &Rater, label: &str, messages: Vec<Message>) -> Result<(String, Usage), BackendError> {
        let request = CompletionRequest::new(label, messages);
        let result = rater.backend.complete(&request);
        if let Some(log) = &self.capture {
            log.record(rater.backend.id(), &request, &result);
        }
        result.map(|r| (r.text, r.usage))
    }

    /// Calls `rater` with `prompt`, reprompting once with a format reminder
    /// when the reply does not parse.
    fn attempt(&self, rater: &Rater, round: Round, prompt: String) -> Attempt {
        let mut attempt = Attempt {
            parsed: None,
            raw: Vec::new(),
            usage: Usage::default(),
            failure: None,
        };
        let mut messages = vec![Message::user(prompt)];
        for n in 0..2 {
            let label = format!("{}.{}.a{n}", round.as_str(), rater.id());
            let (text, usage) = match self.call(rater, &label, messages.clone()) {
                Ok(ok) => ok,
                Err(err) => {
                    attempt.failure = Some(format!("{}: {err}", rater.id()));
                    return attempt;
                }
            };
            attempt.usage.input_units += usage.input_units;
            attempt.usage.output_units += usage.output_units;
            match parse_assessment(&text, &self.rubric, rater.id(), round) {
                Ok(parsed) => {
                    attempt.raw.push(RawModelOutput {
                        rater_id: rater.id().to_string(),
                        round,
                        raw: text,
                        parsed: Some(parsed.assessment.clone()),
                        parse_errors: vec![],
                    });
                    attempt.parsed = Some(parsed);
                    return attempt;
                }
                Err(errors) => {
                    let summary = errors.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
                    attempt.failure = Some(format!("{}: {summary}", rater.id()));
                    attempt.raw.push(RawModelOutput {
                        rater_id: rater.id().to_string(),
                        round,
                        raw: text.clone(),
                        parsed: None,
                        parse_errors: errors,
                    });
                    messages.push(Message::assistant(text));
                    messages.push(Message::user(FORMAT_REMINDER));
                }
            }
        }
        attempt
    }

    fn base_vars(&self, transcript: &Transcript) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("transcript".to_string(), render_transcript(transcript)),
            ("rubric".to_string(), render_rubric(&self.rubric)),
        ])
    }

    /// The Round 1 prompt. It depends only on the transcript and rubric.
    pub fn round1_prompt(&self, transcript: &Transcript) -> Result<String, TemplateError> {
        self.prompts.round1.render(&self.base_vars(transcript))
    }

    pub fn round2_prompt(
        &self,
        transcript: &Transcript,
        own: &Assessment,
        peers: &PeerSummary,
    ) -> Result<String, TemplateError> {
        let mut vars = self.base_vars(transcript);
        vars.insert("own_assessment".into(), render_assessment(own));
        vars.insert("peer_summary".into(), peers.render());
        self.prompts.round2.render(&vars)
    }

    pub fn chair_prompt(
        &self,
        transcript: &Transcript,
        round1: &[Assessment],
        round2: &[Assessment],
    ) -> Result<String, TemplateError> {
        let mut vars = self.base_vars(transcript);
        vars.insert("round1".into(), render_assessments(round1));
        vars.insert("round2".into(), render_assessments(round2));
        self.prompts.chair.render(&vars)
    }

    fn fan_out<F>(&self, raters: &[&Rater], job: F) -> Vec<Attempt>
    where
        F: Fn(&Rater) -> Attempt + Sync,
    {
        std::thread::scope(|scope| {
            let handles: Vec<_> = raters.iter().map(|r| scope.spawn(|| job(r))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("council worker panicked"))
                .collect()
        })
    }

    /// Runs the full pipeline on `transcript`.
    pub fn grade(&self, transcript: &Transcript) -> Result<CouncilOutcome, CouncilError> {
        let transcript = annotate_stacked_turns(transcript.clone());
        let mut flags = Vec::new();
        let mut warnings = Vec::new();
        let mut raw_outputs = Vec::new();
        let mut usage = Vec::new();

        // Round 1
        let prompt = self.round1_prompt(&transcript)?;
        let everyone: Vec<&Rater> = self.raters.iter().collect();
        let attempts = self.fan_out(&everyone, |r| self.attempt(r, Round::R1, prompt.clone()));
        let mut round1 = Vec::new();
        let mut active: Vec<&Rater> = Vec::new();
        let mut failures = Vec::new();
        for (rater, attempt) in everyone.iter().zip(attempts) {
            raw_outputs.extend(attempt.raw);
            usage.push(UsageEntry {
                rater_id: rater.id().to_string(),
                usage: attempt.usage,
            });
            match attempt.parsed {
                Some(parsed) => {
                    warnings.extend(parsed.warnings.iter().map(|w| format!("r1 {}: {w}", rater.id())));
                    round1.push(parsed.assessment);
                    active.push(rater);
                }
                None => {
                    let why = attempt.failure.unwrap_or_else(|| format!("{}: no output", rater.id()));
                    flags.push(Flag::new(
                        FlagKind::ParseFailure,
                        format!("round 1 rater dropped: {why}"),
                        0.0,
                    ));
                    failures.push(why);
                }
            }
        }
        if round1.len() < 2 {
            return Err(CouncilError::InsufficientRaters {
                succeeded: round1.len(),
                failures,
            });
        }

        // Round 2
        let peers = compile_peer_summary(&round1);
        let mut prompts2 = Vec::new();
        for own in &round1 {
            prompts2.push(self.round2_prompt(&transcript, own, &peers)?);
        }
        let attempts = self.fan_out(&active, |r| {
            let i = active.iter().position(|a| a.id() == r.id()).expect("active rater");
            self.attempt(r, Round::R2, prompts2[i].clone())
        });
        let mut round2 = Vec::new();
        for ((rater, attempt), own) in active.iter().zip(attempts).zip(&round1) {
            raw_outputs.extend(attempt.raw);
            usage.push(UsageEntry {
                rater_id: rater.id().to_string(),
                usage: attempt.usage,
            });
            match attempt.parsed {
                Some(parsed) => {
                    warnings.extend(parsed.warnings.iter().map(|w| format!("r2 {}: {w}", rater.id())));
                    round2.push(parsed.assessment);
                }
                None => {
                    let why = attempt.failure.unwrap_or_default();
                    flags.push(Flag::new(
                        FlagKind::ParseFailure,
                        format!("round 2 fell back to round 1 scores: {why}"),
                        0.0,
                    ));
                    round2.push(Assessment {
                        round: Round::R2,
                        ..own.clone()
                    });
                }
            }
        }

        // Chair
        let chair = &self.raters[self.chair];
        let prompt = self.chair_prompt(&transcript, &round1, &round2)?;
        let attempt = self.attempt(chair, Round::Chair, prompt);
        raw_outputs.extend(attempt.raw);
        usage.push(UsageEntry {
            rater_id: chair.id().to_string(),
            usage: attempt.usage,
        });
        let Some(parsed) = attempt.parsed else {
            flags.push(Flag::new(FlagKind::ParseFailure, "chair synthesis failed", 0.0));
            sort_flags(&mut flags);
            return Err(CouncilError::ChairFailed {
                errors: attempt.failure.into_iter().collect(),
                partial: Box::new(PartialCouncil {
                    transcript_ref: transcript.session_id.clone(),
                    round1,
                    round2,
                    flags,
                }),
            });
        };
        warnings.extend(parsed.warnings.iter().map(|w| format!("chair {}: {w}", chair.id())));
        let feedback = parsed.feedback.unwrap_or_default();

        flags.extend(flag_assessments(&round2, &self.thresholds));
        flags.extend(evidence_flags(&parsed.assessment, &feedback, &transcript));
        sort_flags(&mut flags);

        let result = CouncilResult {
            transcript_ref: transcript.session_id.clone(),
            round1,
            round2,
            chair: parsed.assessment,
            feedback,
            flags,
            warnings,
        };
        Ok(CouncilOutcome {
            result,
            raw_outputs,
            usage,
        })
    }
}

/// One `unverified_evidence` flag per chair or feedback quote that does
/// not occur in the transcript.
pub fn evidence_flags(chair: &Assessment, feedback: &FeedbackReport, transcript: &Transcript) -> Vec<Flag> {
    let scores = unverified_in_assessment(chair, transcript)
        .into_iter()
        .map(|(dim, q)| Flag::new(FlagKind::UnverifiedEvidence, format!("chair {dim}: \"{q}\""), 0.0));
    let feedback = unverified_in_feedback(feedback, transcript)
        .into_iter()
        .map(|(loc, q)| Flag::new(FlagKind::UnverifiedEvidence, format!("feedback {loc}: \"{q}\""), 0.0));
    scores.chain(feedback).collect()
}

fn sort_flags(flags: &mut [Flag]) {
    flags.sort_by(|a, b| (a.kind, &a.detail).cmp(&(b.kind, &b.detail)));
}
