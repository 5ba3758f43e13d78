//! `{{variable}}` prompt templates.
//!
//! Rendering fails closed: any placeholder without a value is an error, so
//! an unrendered prompt never reaches a backend.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::model::{ExamCase, StudentContext};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("missing template variable `{0}`")]
    MissingVariable(String),
    #[error("required variable `{0}` does not appear in the template")]
    UnusedRequired(String),
    #[error("unterminated placeholder at byte {0}")]
    Unterminated(usize),
    #[error("invalid placeholder name `{0}`")]
    InvalidName(String),
    #[error("reading template {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Var(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    name: String,
    source: String,
    pieces: Vec<Piece>,
    required: BTreeSet<String>,
}

impl PromptTemplate {
    /// Parses `source`; every placeholder it contains becomes required.
    pub fn parse(name: impl Into<String>, source: impl Into<String>) -> Result<Self, TemplateError> {
        let source = source.into();
        let pieces = tokenize(&source)?;
        let required = pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Var(v) => Some(v.clone()),
                Piece::Text(_) => None,
            })
            .collect();
        Ok(Self {
            name: name.into(),
            source,
            pieces,
            required,
        })
    }

    /// Parses `source` and checks that each of `required` appears in it.
    pub fn with_required<I, S>(name: impl Into<String>, source: impl Into<String>, required: I) -> Result<Self, TemplateError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let template = Self::parse(name, source)?;
        for var in required {
            if !template.required.contains(var.as_ref()) {
                return Err(TemplateError::UnusedRequired(var.as_ref().to_string()));
            }
        }
        Ok(template)
    }

    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        let source = std::fs::read_to_string(path).map_err(|e| TemplateError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::parse(name, source)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn required(&self) -> &BTreeSet<String> {
        &self.required
    }

    pub fn render(&self, vars: &BTreeMap<String, String>) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.source.len());
        for piece in &self.pieces {
            match piece {
                Piece::Text(text) => out.push_str(text),
                Piece::Var(name) => {
                    let value = vars
                        .get(name)
                        .ok_or_else(|| TemplateError::MissingVariable(name.clone()))?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }
}

fn tokenize(source: &str) -> Result<Vec<Piece>, TemplateError> {
    let mut pieces = Vec::new();
    let mut rest = source;
    let mut offset = 0;
    while let Some(start) = rest.find("{{") {
        if start > 0 {
            pieces.push(Piece::Text(rest[..start].to_string()));
        }
        let after = &rest[start + 2..];
        let end = after
            .find("}}")
            .ok_or(TemplateError::Unterminated(offset + start))?;
        let name = after[..end].trim();
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
            return Err(TemplateError::InvalidName(after[..end].to_string()));
        }
        pieces.push(Piece::Var(name.to_string()));
        let consumed = start + 2 + end + 2;
        offset += consumed;
        rest = &rest[consumed..];
    }
    if !rest.is_empty() {
        pieces.push(Piece::Text(rest.to_string()));
    }
    Ok(pieces)
}

/// Per-session dynamic variables: student context, extra variables, the
/// selected case and the seed.
pub fn session_vars(
    session_id: &str,
    student: &StudentContext,
    case: Option<&ExamCase>,
    seed: u64,
) -> BTreeMap<String, String> {
    let mut vars: BTreeMap<String, String> = student
        .extra_vars
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    vars.insert("session_id".into(), session_id.to_string());
    vars.insert("student_id".into(), student.student_id.clone());
    vars.insert("display_name".into(), student.display_name.clone());
    vars.insert("name".into(), student.display_name.clone());
    vars.insert("project_summary".into(), student.project_summary.clone());
    vars.insert("seed".into(), seed.to_string());
    if let Some(case) = case {
        vars.insert("case_id".into(), case.id.clone());
        vars.insert("case_title".into(), case.title.clone());
        vars.insert("case_brief".into(), case.brief.clone());
        vars.insert("case_topics".into(), case.topic_tags.join(", "));
    }
    vars
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vars(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn substitutes_variable() {
        let t = PromptTemplate::parse("p", "Discuss {{project_summary}}").unwrap();
        assert_eq!(
            t.render(&vars(&[("project_summary", "churn model")])).unwrap(),
            "Discuss churn model"
        );
    }

    #[test]
    fn missing_variable_is_named() {
        let t = PromptTemplate::parse("p", "Hello {{ name }}!").unwrap();
        assert_eq!(t.render(&vars(&[])), Err(TemplateError::MissingVariable("name".into())));
    }

    #[test]
    fn repeated_variable_substituted_everywhere() {
        let t = PromptTemplate::parse("p", "{{x}} and {{x}} again").unwrap();
        assert_eq!(t.render(&vars(&[("x", "A")])).unwrap(), "A and A again");
    }

    #[test]
    fn required_must_appear() {
        let err = PromptTemplate::with_required("p", "no vars", ["name"]).unwrap_err();
        assert_eq!(err, TemplateError::UnusedRequired("name".into()));
        assert!(PromptTemplate::with_required("p", "{{name}}", ["name"]).is_ok());
    }

    #[test]
    fn malformed_placeholders_rejected() {
        assert_eq!(PromptTemplate::parse("p", "hi {{name"), Err(TemplateError::Unterminated(3)));
        assert!(matches!(
            PromptTemplate::parse("p", "hi {{two words}}"),
            Err(TemplateError::InvalidName(_))
        ));
    }

    proptest! {
        #[test]
        fn rendered_output_has_no_placeholders(
            names in proptest::collection::vec("[a-z_]{1,8}", 1..5),
            filler in "[a-zA-Z ,.]{0,20}",
            value in "[a-zA-Z0-9 ]{0,12}",
        ) {
            let source: String = names.iter().map(|n| format!("{filler}{{{{{n}}}}}")).collect();
            let t = PromptTemplate::parse("p", source).unwrap();
            let vars: BTreeMap<String, String> = names.iter().map(|n| (n.clone(), value.clone())).collect();
            let out = t.render(&vars).unwrap();
            prop_assert!(!out.contains("{{"));
        }
    }
}
