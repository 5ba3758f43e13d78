use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{word_units, Backend, BackendError, CompletionRequest, CompletionResponse, Usage};
use crate::model::{ModelError, Validate};

/// One scripted reply.
///
/// A rule matches when every condition it sets holds: `prompt_hash` equals
/// the request's prompt hash, `contains` occurs in the prompt text, and
/// `ordinal` equals the number of earlier calls with the same prompt hash.
/// A rule with no conditions matches everything. The n-th time a rule
/// fires it answers `responses[n]`, repeating the last entry once the list
/// runs out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ordinal: Option<u32>,
    pub responses: Vec<String>,
}

impl MockRule {
    pub fn when_contains(needle: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            prompt_hash: None,
            contains: Some(needle.into()),
            ordinal: None,
            responses: vec![response.into()],
        }
    }

    pub fn when_hash(hash: impl Into<String>, ordinal: Option<u32>, response: impl Into<String>) -> Self {
        Self {
            prompt_hash: Some(hash.into()),
            contains: None,
            ordinal,
            responses: vec![response.into()],
        }
    }

    pub fn always<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            prompt_hash: None,
            contains: None,
            ordinal: None,
            responses: responses.into_iter().map(Into::into).collect(),
        }
    }

    fn matches(&self, hash: &str, prompt: &str, ordinal: u32) -> bool {
        self.prompt_hash.as_deref().map_or(true, |h| h == hash)
            && self.contains.as_deref().map_or(true, |c| prompt.contains(c))
            && self.ordinal.map_or(true, |o| o == ordinal)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
}

impl MockScript {
    pub fn new(rules: Vec<MockRule>) -> Self {
        Self { rules }
    }
}

/// A `--mock-script` file: one script per backend, keyed by rater id
/// (or `examiner`).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScriptSet {
    pub scripts: BTreeMap<String, MockScript>,
}

impl Validate for MockScriptSet {
    fn validate(&self) -> Result<(), ModelError> {
        for (id, script) in &self.scripts {
            for (i, rule) in script.rules.iter().enumerate() {
                if rule.responses.is_empty() {
                    return Err(ModelError::schema(
                        format!("scripts.{id}.rules[{i}].responses"),
                        "a rule needs at least one response",
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
struct Counters {
    per_hash: HashMap<String, u32>,
    per_rule: HashMap<usize, usize>,
}

/// Deterministic scripted backend. A fresh instance given the same request
/// sequence always produces the same replies.
#[derive(Debug)]
pub struct MockBackend {
    id: String,
    script: MockScript,
    counters: Mutex<Counters>,
}

impl MockBackend {
    pub fn new(id: impl Into<String>, script: MockScript) -> Self {
        Self {
            id: id.into(),
            script,
            counters: Mutex::new(Counters::default()),
        }
    }
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let prompt = request.prompt_text();
        let hash = request.prompt_hash();
        let mut counters = self.counters.lock().expect("mock counter lock poisoned");
        let ordinal = *counters.per_hash.get(&hash).unwrap_or(&0);
        counters.per_hash.insert(hash.clone(), ordinal + 1);
        let Some((rule_index, rule)) = self
            .script
            .rules
            .iter()
            .enumerate()
            .find(|(_, r)| r.matches(&hash, &prompt, ordinal))
        else {
            return Err(BackendError::MockMiss { hash, ordinal });
        };
        let fired = counters.per_rule.entry(rule_index).or_insert(0);
        let text = rule
            .responses
            .get(*fired)
            .or_else(|| rule.responses.last())
            .cloned()
            .ok_or(BackendError::EmptyResponse)?;
        *fired += 1;
        Ok(CompletionResponse {
            usage: Usage {
                input_units: word_units(&prompt),
                output_units: word_units(&text),
            },
            text,
            latency_ms: 0,
        })
    }
}
