//! Completion backends: a chat-completion HTTP client and two offline mocks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{LlmError, RenderedPrompt};
use crate::http::{post_json, Endpoint};
use crate::nlu::NluOutput;
use crate::ontology::Ontology;
use crate::tracker::{emit_result, update, DialogueState};
use crate::validator::ValidationVerdict;

/// What the tracker knew when it asked for a completion. Real models ignore
/// it; [`RuleEchoBackend`] uses it to answer the way the rule tracker would.
#[derive(Debug, Clone, Copy)]
pub struct TurnContext<'a> {
    /// State before the turn.
    pub prior: &'a DialogueState,
    pub nlu: &'a NluOutput,
    pub verdict: &'a ValidationVerdict,
    pub ontology: &'a Ontology,
}

#[derive(Debug, Clone, Copy)]
pub struct CompletionRequest<'a> {
    pub prompt: &'a RenderedPrompt,
    pub turn: Option<TurnContext<'a>>,
}

pub trait CompletionBackend: Send + Sync {
    fn complete(&self, req: &CompletionRequest<'_>) -> Result<String, LlmError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionEndpoint {
    #[serde(flatten)]
    pub endpoint: Endpoint,
    pub model_name: String,
}

/// Client for `POST {base}/v1/chat/completions`.
#[derive(Debug, Clone)]
pub struct HttpCompletion {
    config: CompletionEndpoint,
}

impl HttpCompletion {
    pub fn new(config: CompletionEndpoint) -> Result<Self, LlmError> {
        config.endpoint.validate()?;
        Ok(HttpCompletion { config })
    }

    pub fn config(&self) -> &CompletionEndpoint {
        &self.config
    }
}

impl CompletionBackend for HttpCompletion {
    fn complete(&self, req: &CompletionRequest<'_>) -> Result<String, LlmError> {
        let body = json!({
            "model": self.config.model_name,
            "messages": [
                {"role": "system", "content": req.prompt.system},
                {"role": "user", "content": req.prompt.user},
            ],
            "temperature": 0,
        });
        let resp = post_json(&self.config.endpoint, "/v1/chat/completions", &body)?;
        log::debug!("completion succeeded after {} attempt(s)", resp.attempts);
        resp.body["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| {
                LlmError::Http(crate::http::HttpError::Envelope {
                    url: self.config.endpoint.url("/v1/chat/completions"),
                    message: "missing choices[0].message.content".into(),
                })
            })
    }
}

/// Canned replies keyed by the SHA-256 hex digest of the prompt text.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CannedBackend {
    replies: BTreeMap<String, String>,
}

impl CannedBackend {
    pub fn from_json(text: &str) -> Result<Self, LlmError> {
        serde_json::from_str(text).map_err(|e| LlmError::Template(format!("canned replies: {e}")))
    }

    pub fn insert(&mut self, prompt: &RenderedPrompt, reply: impl Into<String>) {
        self.replies.insert(prompt.digest(), reply.into());
    }

    pub fn len(&self) -> usize {
        self.replies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replies.is_empty()
    }
}

impl CompletionBackend for CannedBackend {
    fn complete(&self, req: &CompletionRequest<'_>) -> Result<String, LlmError> {
        let key = req.prompt.digest();
        self.replies.get(&key).cloned().ok_or(LlmError::NoCannedReply(key))
    }
}

/// Answers with the rule tracker's result for the turn, serialized as the
/// model would. Used to check that the LLM path and the rule path agree.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleEchoBackend;

impl CompletionBackend for RuleEchoBackend {
    fn complete(&self, req: &CompletionRequest<'_>) -> Result<String, LlmError> {
        let t = req.turn.ok_or(LlmError::MissingContext)?;
        let (next, _) = update(t.prior, t.nlu, t.verdict, t.ontology)?;
        Ok(emit_result(&next, t.ontology)?.to_json())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prompt(u: &str) -> RenderedPrompt {
        RenderedPrompt {
            system: "sys".into(),
            user: u.into(),
        }
    }

    #[test]
    fn canned_lookup_by_digest() {
        let mut c = CannedBackend::default();
        c.insert(&prompt("a"), "reply-a");
        let p = prompt("a");
        assert_eq!(c.complete(&CompletionRequest { prompt: &p, turn: None }).unwrap(), "reply-a");
        let q = prompt("b");
        assert!(matches!(
            c.complete(&CompletionRequest { prompt: &q, turn: None }),
            Err(LlmError::NoCannedReply(_))
        ));
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains(&p.digest()));
        assert_eq!(CannedBackend::from_json(&json).unwrap(), c);
    }

    #[test]
    fn echo_needs_context() {
        let p = prompt("x");
        assert!(matches!(
            RuleEchoBackend.complete(&CompletionRequest { prompt: &p, turn: None }),
            Err(LlmError::MissingContext)
        ));
    }
}
