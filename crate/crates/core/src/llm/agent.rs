//! Answer generation for completed requests: retrieve rows for the filled
//! state, then render them with a template or a second completion call.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::backend::{CompletionBackend, CompletionRequest};
use super::{LlmError, RenderedPrompt};
use crate::ontology::ANY_VALUE;
use crate::tracker::{DialogueStatus, DstResult};

pub const NO_DATA_ANSWER: &str = "Sorry, I could not find any information for that request.";

pub type Row = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalKey {
    pub intent: String,
    pub state: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievedRow {
    /// Identifies the row in its source; reported back as a source.
    pub key: String,
    pub fields: Row,
}

pub trait Retriever: Send + Sync {
    fn retrieve(&self, key: &RetrievalKey) -> Result<Vec<RetrievedRow>, LlmError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub key: String,
    pub intent: String,
    /// Slot values the state must carry (case-insensitive).
    #[serde(rename = "match")]
    pub matches: Row,
    pub row: Row,
}

/// Rows from a fixture file. An entry matches when every slot it names is
/// filled with the same value, or with the any-value sentinel.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FixtureRetriever {
    entries: Vec<FixtureEntry>,
}

impl FixtureRetriever {
    pub fn new(entries: Vec<FixtureEntry>) -> Self {
        FixtureRetriever { entries }
    }

    pub fn from_json(text: &str) -> Result<Self, LlmError> {
        serde_json::from_str(text).map_err(|e| LlmError::Retrieval(format!("fixture file: {e}")))
    }
}

impl Retriever for FixtureRetriever {
    fn retrieve(&self, key: &RetrievalKey) -> Result<Vec<RetrievedRow>, LlmError> {
        Ok(self
            .entries
            .iter()
            .filter(|e| e.intent == key.intent)
            .filter(|e| {
                e.matches.iter().all(|(slot, want)| match key.state.get(slot) {
                    Some(v) => v == ANY_VALUE || v.eq_ignore_ascii_case(want),
                    None => false,
                })
            })
            .map(|e| RetrievedRow {
                key: e.key.clone(),
                fields: e.row.clone(),
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentAnswer {
    pub text: String,
    pub sources: Vec<String>,
}

fn describe_request(result: &DstResult) -> String {
    let intent = result.intent.replace('_', " ");
    let constraints: Vec<String> = result
        .state
        .iter()
        .filter(|(_, v)| v.as_str() != ANY_VALUE)
        .map(|(k, v)| format!("{k} {v}"))
        .collect();
    if constraints.is_empty() {
        intent
    } else {
        format!("{intent} ({})", constraints.join(", "))
    }
}

fn describe_row(row: &Row) -> String {
    row.iter().map(|(k, v)| format!("{k}: {v}")).collect::<Vec<_>>().join(", ")
}

/// Answers a completed request. Without a backend the rows are rendered
/// with a fixed template; with one, they are inlined into a second prompt.
pub fn generate_answer(
    result: &DstResult,
    retriever: &dyn Retriever,
    backend: Option<&dyn CompletionBackend>,
) -> Result<AgentAnswer, LlmError> {
    if result.dialogue_status != DialogueStatus::Complete {
        return Err(LlmError::Incomplete);
    }
    let rows = retriever.retrieve(&RetrievalKey {
        intent: result.intent.clone(),
        state: result.state.clone(),
    })?;
    if rows.is_empty() {
        return Ok(AgentAnswer {
            text: NO_DATA_ANSWER.to_string(),
            sources: Vec::new(),
        });
    }
    let sources = rows.iter().map(|r| r.key.clone()).collect();
    let text = match backend {
        None => {
            let lines: Vec<String> = rows.iter().map(|r| describe_row(&r.fields)).collect();
            format!("Here is what I found for {}: {}.", describe_request(result), lines.join("; "))
        }
        Some(b) => {
            let data = rows
                .iter()
                .map(|r| format!("- {}", describe_row(&r.fields)))
                .collect::<Vec<_>>()
                .join("\n");
            let prompt = RenderedPrompt {
                system: "You answer the user's request using only the data given.".into(),
                user: format!("Request: {}\nData:\n{data}\nAnswer in one or two sentences.", describe_request(result)),
            };
            b.complete(&CompletionRequest { prompt: &prompt, turn: None })?
        }
    };
    Ok(AgentAnswer { text, sources })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::querygen::SqlQuery;

    fn weather(city: &str) -> DstResult {
        DstResult {
            dialogue_status: DialogueStatus::Complete,
            intent: "get_weather".into(),
            state: BTreeMap::from([("city".into(), city.into())]),
            sql: SqlQuery {
                text: "SELECT * FROM get_weather WHERE city = ?".into(),
                params: vec![city.into()],
            },
            followup: None,
        }
    }

    fn retriever() -> FixtureRetriever {
        FixtureRetriever::new(vec![FixtureEntry {
            key: "weather/tehran".into(),
            intent: "get_weather".into(),
            matches: Row::from([("city".into(), "tehran".into())]),
            row: Row::from([("city".into(), "Tehran".into()), ("forecast".into(), "sunny, 31C".into())]),
        }])
    }

    #[test]
    fn template_answer_mentions_city_and_value() {
        let a = generate_answer(&weather("Tehran"), &retriever(), None).unwrap();
        assert!(a.text.contains("Tehran") && a.text.contains("sunny, 31C"), "{}", a.text);
        assert_eq!(a.sources, ["weather/tehran"]);
    }

    #[test]
    fn empty_retrieval() {
        let a = generate_answer(&weather("Paris"), &retriever(), None).unwrap();
        assert_eq!(a.text, NO_DATA_ANSWER);
        assert!(a.sources.is_empty());
    }

    #[test]
    fn in_progress_is_rejected() {
        let mut r = weather("Tehran");
        r.dialogue_status = DialogueStatus::InProgress;
        r.followup = Some("Which city?".into());
        assert!(matches!(generate_answer(&r, &retriever(), None), Err(LlmError::Incomplete)));
    }

    #[test]
    fn remote_mode_inlines_rows() {
        struct Echo;
        impl CompletionBackend for Echo {
            fn complete(&self, req: &CompletionRequest<'_>) -> Result<String, LlmError> {
                Ok(req.prompt.user.clone())
            }
        }
        let a = generate_answer(&weather("Tehran"), &retriever(), Some(&Echo)).unwrap();
        assert!(a.text.contains("forecast: sunny, 31C"));
    }
}
