//! LLM-backed tracking: prompt selection and rendering, completion
//! backends, structured-output parsing, and the answer agent.
//!
//! The LLM tracker keeps the rule tracker in charge of the intent: unclear
//! and ambiguous turns never reach the model, and intent adoption and shifts
//! follow the same rules. The model proposes the slot state; the proposal is
//! parsed, checked against the ontology, and merged back as ordinary fills.
//! The SQL and the follow-up question are then rebuilt locally, so the query
//! generator and the question bank stay authoritative.

pub mod agent;
pub mod backend;
pub mod parse;
pub mod prompt;

use sha2::{Digest, Sha256};

use crate::http::HttpError;
use crate::nlu::{NluOutput, ScheduleInput};
use crate::ontology::Ontology;
use crate::tracker::{
    begin_turn, conclude, fill_dont_care, fill_extracted, DialogueState, IntentStep, TrackerAction, TrackerError,
};
use crate::validator::ValidationVerdict;

pub use agent::{generate_answer, AgentAnswer, FixtureRetriever, RetrievalKey, Retriever};
pub use backend::{
    CannedBackend, CompletionBackend, CompletionEndpoint, CompletionRequest, HttpCompletion, RuleEchoBackend,
    TurnContext,
};
pub use parse::{check_result, parse_structured_output};
pub use prompt::{render_prompt, select_prompt, PromptLibrary, PromptTemplate, RenderedPrompt};

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("prompt template error: {0}")]
    Template(String),
    #[error("unparseable model output: {0}")]
    Unparseable(String),
    #[error("missing key: {0}")]
    MissingKey(&'static str),
    #[error("invalid model output: {0}")]
    Invalid(String),
    #[error("no canned reply for prompt digest {0}")]
    NoCannedReply(String),
    #[error("backend needs the turn context")]
    MissingContext,
    #[error("retrieval failed: {0}")]
    Retrieval(String),
    #[error("answers need a complete result")]
    Incomplete,
    #[error(transparent)]
    Http(#[from] HttpError),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// One turn of the LLM-backed tracker. Same contract as
/// [`crate::tracker::update`].
pub fn llm_update(
    state: &DialogueState,
    nlu: &NluOutput,
    verdict: &ValidationVerdict,
    schedule: &ScheduleInput,
    ontology: &Ontology,
    library: &PromptLibrary,
    backend: &dyn CompletionBackend,
) -> Result<(DialogueState, TrackerAction), LlmError> {
    let mut st = state.clone();
    if let IntentStep::Pause(action) = begin_turn(&mut st, nlu, verdict, ontology)? {
        return Ok((st, action));
    }
    let active = st.active_intent.clone().ok_or(TrackerError::NoActiveIntent)?;
    let schema = ontology.intent(&active).map_err(TrackerError::from)?;
    let prompt = render_prompt(library.select(&active), schedule, &st, schema)?;
    let raw = backend.complete(&CompletionRequest {
        prompt: &prompt,
        turn: Some(TurnContext {
            prior: state,
            nlu,
            verdict,
            ontology,
        }),
    })?;
    let proposed = parse_structured_output(&raw)?;
    check_result(&proposed, ontology)?;
    if proposed.intent != active {
        return Err(LlmError::Invalid(format!(
            "model answered for `{}` while `{active}` is active",
            proposed.intent
        )));
    }

    // Merge in the order the rule tracker uses: extracted values, then
    // "don't care" defaults, then anything the model added on its own.
    let mut merged = std::collections::BTreeSet::new();
    for (slot, value) in &nlu.slots {
        if proposed.state.get(slot) == Some(value) {
            fill_extracted(&mut st, schema, slot, value);
            merged.insert(slot.as_str());
        }
    }
    for slot in &nlu.dont_care_slots {
        let default = schema.slot(slot).map(|d| d.dont_care_value());
        if default.is_some() && proposed.state.get(slot).map(String::as_str) == default {
            fill_dont_care(&mut st, schema, slot);
            merged.insert(slot.as_str());
        }
    }
    for (slot, value) in &proposed.state {
        let unchanged = st.fills.get(slot).is_some_and(|f| &f.value == value);
        if !merged.contains(slot.as_str()) && !unchanged {
            fill_extracted(&mut st, schema, slot, value);
        }
    }
    if let Some(dropped) = st.fills.keys().find(|k| !proposed.state.contains_key(*k)) {
        log::debug!("model dropped slot `{dropped}`; keeping the tracked value");
    }
    Ok((st.clone(), conclude(&st, ontology)?))
}
