//! One conversation turn end to end: schedule, NLU, validation, tracking.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::llm::{llm_update, CompletionBackend, LlmError, PromptLibrary};
use crate::nlu::{build_schedule, NluBackend, NluError, NluOutput, ScheduleInput};
use crate::ontology::Ontology;
use crate::tracker::{emit_result, update, ActionKind, DialogueState, DstResult, StateRecord, TrackerAction, TrackerError};
use crate::validator::{FeatureState, ValidationVerdict, Validator, ValidatorError};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("empty utterance")]
    EmptyUtterance,
    #[error(transparent)]
    Nlu(#[from] NluError),
    #[error(transparent)]
    Validator(#[from] ValidatorError),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Clone)]
pub enum TrackerMode {
    Rule,
    Llm {
        library: Arc<PromptLibrary>,
        backend: Arc<dyn CompletionBackend>,
    },
}

impl std::fmt::Debug for TrackerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrackerMode::Rule => f.write_str("Rule"),
            TrackerMode::Llm { .. } => f.write_str("Llm"),
        }
    }
}

/// Everything a turn needs besides the conversation itself.
#[derive(Clone)]
pub struct Engine {
    pub ontology: Arc<Ontology>,
    pub nlu: Arc<dyn NluBackend>,
    pub validator: Arc<Validator>,
    pub tracker: TrackerMode,
}

/// Per-conversation state that lives outside the tracker: the schedule
/// history and the validator's running features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub state: DialogueState,
    /// Prior user utterances with the intent each resolved to.
    pub schedule: Vec<(String, Option<String>)>,
    pub features: FeatureState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnOutcome {
    pub nlu: NluOutput,
    pub verdict: ValidationVerdict,
    pub action: TrackerAction,
    /// The current result whenever an intent is active.
    pub result: Option<DstResult>,
    /// Records this turn appended to the history.
    pub records: Vec<StateRecord>,
    /// The schedule line this turn contributes to later turns.
    pub schedule_line: (String, Option<String>),
}

impl Conversation {
    pub fn new(state: DialogueState) -> Self {
        Conversation {
            state,
            schedule: Vec::new(),
            features: FeatureState::default(),
        }
    }

    /// Rebuilds a conversation from its persisted parts. Feature state is
    /// recomputed from the score maps of every past turn.
    pub fn restore<'a>(
        session_id: &str,
        rng_seed: u64,
        records: impl IntoIterator<Item = &'a StateRecord>,
        schedule: Vec<(String, Option<String>)>,
        score_history: impl IntoIterator<Item = &'a std::collections::BTreeMap<String, f64>>,
    ) -> Result<Self, TrackerError> {
        let mut features = FeatureState::default();
        for s in score_history {
            features.push(s);
        }
        Ok(Conversation {
            state: DialogueState::replay(session_id, rng_seed, records)?,
            schedule,
            features,
        })
    }

    pub fn schedule_for(&self, text: &str) -> ScheduleInput {
        build_schedule(self.schedule.iter().cloned(), text)
    }
}

impl Engine {
    pub fn rule(ontology: Arc<Ontology>, nlu: Arc<dyn NluBackend>, validator: Validator) -> Self {
        Engine {
            ontology,
            nlu,
            validator: Arc::new(validator),
            tracker: TrackerMode::Rule,
        }
    }

    pub fn with_tracker(mut self, tracker: TrackerMode) -> Self {
        self.tracker = tracker;
        self
    }

    /// Runs one user turn. On error the conversation is left untouched.
    pub fn step(&self, conv: &mut Conversation, text: &str) -> Result<TurnOutcome, EngineError> {
        self.step_with(conv, text, self.nlu.as_ref())
    }

    /// [`Engine::step`] with a different NLU backend for this turn.
    pub fn step_with(&self, conv: &mut Conversation, text: &str, nlu: &dyn NluBackend) -> Result<TurnOutcome, EngineError> {
        if text.trim().is_empty() {
            return Err(EngineError::EmptyUtterance);
        }
        let schedule = conv.schedule_for(text);
        let out = nlu.predict(&self.ontology, &schedule)?;
        out.check(&self.ontology)?;
        let mut features = conv.features;
        let f = features.push(&out.scores);
        let verdict = self.validator.verdict(f, &out)?;
        let (state, action) = match &self.tracker {
            TrackerMode::Rule => update(&conv.state, &out, &verdict, &self.ontology)?,
            TrackerMode::Llm { library, backend } => llm_update(
                &conv.state,
                &out,
                &verdict,
                &schedule,
                &self.ontology,
                library,
                backend.as_ref(),
            )?,
        };
        let result = match (&action.result, &state.active_intent) {
            (Some(r), _) => Some(r.clone()),
            (None, Some(_)) => Some(emit_result(&state, &self.ontology)?),
            (None, None) => None,
        };
        let paused = matches!(action.kind, ActionKind::AskClarifyIntent | ActionKind::AskClarifyUnclear);
        let resolved = if paused { None } else { state.active_intent.clone() };
        let records = state.history[conv.state.history.len()..].to_vec();
        let schedule_line = (text.to_string(), resolved);

        conv.state = state;
        conv.features = features;
        conv.schedule.push(schedule_line.clone());
        Ok(TurnOutcome {
            nlu: out,
            verdict,
            action,
            result,
            records,
            schedule_line,
        })
    }
}
