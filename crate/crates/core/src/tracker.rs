//! The dialogue state machine. Every change to a [`DialogueState`] goes
//! through [`DialogueState::apply`] as a [`StateRecord`], so replaying the
//! history against a fresh session rebuilds the state exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::nlu::NluOutput;
use crate::ontology::{splitmix64, IntentKind, IntentSchema, Ontology, OntologyError};
use crate::querygen::{build_query, QueryError, SqlQuery};
use crate::validator::{Label, ValidationVerdict};

pub const UNCLEAR_QUESTION: &str = "Sorry, I did not catch what you need. Could you say it another way?";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TrackerError {
    #[error("verdict is for intent `{verdict}` but the NLU context intent is `{nlu}`")]
    VerdictMismatch { verdict: String, nlu: String },
    #[error("unknown intent `{0}`")]
    UnknownIntent(String),
    #[error("no active intent")]
    NoActiveIntent,
    #[error("history record {index} cannot be applied: {reason}")]
    BadRecord { index: usize, reason: String },
    #[error(transparent)]
    Ontology(#[from] OntologyError),
    #[error(transparent)]
    Query(#[from] QueryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillSource {
    Extracted,
    DontCareDefault,
    CarriedOver,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotFill {
    pub value: String,
    pub source: FillSource,
    pub turn_no: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pending {
    #[default]
    None,
    AwaitingClarificationUnclear,
    AwaitingClarificationAmbiguous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    /// A user turn began; `intent` is the validator's chosen intent.
    Turn,
    PendingUnclear,
    PendingAmbiguous,
    Adopt,
    Shift,
    Carry,
    Drop,
    FillExtracted,
    FillDontCare,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateRecord {
    pub turn_no: u32,
    pub kind: RecordKind,
    pub intent: String,
    pub slot: Option<String>,
    pub value: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueState {
    pub session_id: String,
    pub active_intent: Option<String>,
    pub fills: BTreeMap<String, SlotFill>,
    pub history: Vec<StateRecord>,
    pub pending: Pending,
    pub turn_no: u32,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    AskFollowup,
    AskClarifyIntent,
    AskClarifyUnclear,
    Complete,
}

impl ActionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::AskFollowup => "ask_followup",
            ActionKind::AskClarifyIntent => "ask_clarify_intent",
            ActionKind::AskClarifyUnclear => "ask_clarify_unclear",
            ActionKind::Complete => "complete",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DialogueStatus {
    InProgress,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DstResult {
    pub dialogue_status: DialogueStatus,
    pub intent: String,
    pub state: BTreeMap<String, String>,
    pub sql: SqlQuery,
    pub followup: Option<String>,
}

impl DstResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("result serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackerAction {
    pub kind: ActionKind,
    pub question: Option<String>,
    pub result: Option<DstResult>,
}

impl TrackerAction {
    fn ask(kind: ActionKind, question: String) -> Self {
        TrackerAction {
            kind,
            question: Some(question),
            result: None,
        }
    }

    /// The text shown to the user.
    pub fn reply(&self) -> &str {
        self.question.as_deref().unwrap_or("Done.")
    }
}

pub fn new_session(_ontology: &Ontology, seed: u64) -> DialogueState {
    DialogueState::new(uuid::Uuid::new_v4().to_string(), seed)
}

/// Seed for the follow-up question asked at `turn_no`.
pub fn question_seed(rng_seed: u64, turn_no: u32) -> u64 {
    splitmix64(rng_seed) ^ u64::from(turn_no)
}

fn display_intent(id: &str) -> String {
    id.replace('_', " ")
}

pub fn ambiguous_question(a: &str, b: &str) -> String {
    format!("Did you mean {} or {}?", display_intent(a), display_intent(b))
}

/// True iff both NLU runs agree on an intent other than the active one.
pub fn detect_intent_shift(state: &DialogueState, nlu: &NluOutput) -> bool {
    match state.active_intent.as_deref() {
        Some(active) => {
            nlu.turn_local_intent != active
                && nlu.context_intent != active
                && nlu.turn_local_intent == nlu.context_intent
        }
        None => false,
    }
}

impl DialogueState {
    pub fn new(session_id: impl Into<String>, rng_seed: u64) -> Self {
        DialogueState {
            session_id: session_id.into(),
            active_intent: None,
            fills: BTreeMap::new(),
            history: Vec::new(),
            pending: Pending::None,
            turn_no: 0,
            rng_seed,
        }
    }

    /// Rebuilds a state from its record log.
    pub fn replay<'a>(
        session_id: impl Into<String>,
        rng_seed: u64,
        records: impl IntoIterator<Item = &'a StateRecord>,
    ) -> Result<Self, TrackerError> {
        let mut st = DialogueState::new(session_id, rng_seed);
        for r in records {
            st.apply(r.clone())?;
        }
        Ok(st)
    }

    pub fn filled_values(&self) -> BTreeMap<String, String> {
        self.fills.iter().map(|(k, f)| (k.clone(), f.value.clone())).collect()
    }

    /// Applies one record and appends it to the history.
    pub fn apply(&mut self, r: StateRecord) -> Result<(), TrackerError> {
        let bad = |reason: &str| TrackerError::BadRecord {
            index: self.history.len(),
            reason: reason.to_string(),
        };
        if r.kind == RecordKind::Turn {
            if r.turn_no != self.turn_no + 1 {
                return Err(bad("turn numbers must increase by one"));
            }
            self.turn_no = r.turn_no;
            self.pending = Pending::None;
        } else if r.turn_no != self.turn_no {
            return Err(bad("record outside the current turn"));
        }
        let slot_value = || match (&r.slot, &r.value) {
            (Some(s), Some(v)) => Ok((s.clone(), v.clone())),
            _ => Err(bad("slot and value required")),
        };
        match r.kind {
            RecordKind::Turn => {}
            RecordKind::PendingUnclear => self.pending = Pending::AwaitingClarificationUnclear,
            RecordKind::PendingAmbiguous => self.pending = Pending::AwaitingClarificationAmbiguous,
            RecordKind::Adopt | RecordKind::Shift => self.active_intent = Some(r.intent.clone()),
            RecordKind::Carry => {
                let (s, v) = slot_value()?;
                self.fills.insert(s, SlotFill { value: v, source: FillSource::CarriedOver, turn_no: r.turn_no });
            }
            RecordKind::Drop => {
                let s = r.slot.as_ref().ok_or_else(|| bad("slot required"))?;
                self.fills.remove(s);
            }
            RecordKind::FillExtracted | RecordKind::FillDontCare => {
                let (s, v) = slot_value()?;
                let source = if r.kind == RecordKind::FillExtracted {
                    FillSource::Extracted
                } else {
                    FillSource::DontCareDefault
                };
                self.fills.insert(s, SlotFill { value: v, source, turn_no: r.turn_no });
            }
        }
        self.history.push(r);
        Ok(())
    }

    fn record(&mut self, kind: RecordKind, intent: &str, slot: Option<&str>, value: Option<&str>) {
        let r = StateRecord {
            turn_no: self.turn_no,
            kind,
            intent: intent.to_string(),
            slot: slot.map(str::to_string),
            value: value.map(str::to_string),
        };
        self.apply(r).expect("tracker emits well-formed records");
    }

    fn active_schema<'o>(&self, ontology: &'o Ontology) -> Result<&'o IntentSchema, TrackerError> {
        let id = self.active_intent.as_deref().ok_or(TrackerError::NoActiveIntent)?;
        ontology.get_intent(id).ok_or_else(|| TrackerError::UnknownIntent(id.to_string()))
    }
}

/// Outcome of the intent phase of a turn.
pub(crate) enum IntentStep {
    /// The turn ends with a clarification request.
    Pause(TrackerAction),
    /// The active intent is settled; slots may be filled.
    Proceed,
}

/// Rules 1–4: start the turn, pause on unclear or ambiguous verdicts, adopt
/// or switch the active intent.
pub(crate) fn begin_turn(
    state: &mut DialogueState,
    nlu: &NluOutput,
    verdict: &ValidationVerdict,
    ontology: &Ontology,
) -> Result<IntentStep, TrackerError> {
    if verdict.chosen_intent != nlu.context_intent {
        return Err(TrackerError::VerdictMismatch {
            verdict: verdict.chosen_intent.clone(),
            nlu: nlu.context_intent.clone(),
        });
    }
    let chosen = ontology
        .get_intent(&verdict.chosen_intent)
        .ok_or_else(|| TrackerError::UnknownIntent(verdict.chosen_intent.clone()))?;
    let turn_no = state.turn_no + 1;
    state
        .apply(StateRecord {
            turn_no,
            kind: RecordKind::Turn,
            intent: chosen.id.clone(),
            slot: None,
            value: None,
        })
        .expect("turn record");

    // A confirmed "don't care" only means something inside a task, and an
    // out-of-domain request cannot be served; both are treated as unclear.
    let unusable = match chosen.kind {
        IntentKind::Normal => false,
        IntentKind::DontCare => state.active_intent.is_none(),
        IntentKind::OutOfDomain => true,
    };
    match verdict.label {
        Label::Unclear => {}
        Label::Confirmed if unusable => {}
        Label::Ambiguous => {
            state.record(RecordKind::PendingAmbiguous, &chosen.id, None, None);
            let ranked = nlu.ranked();
            let a = ranked.first().map_or(chosen.id.as_str(), |r| r.0);
            let b = ranked.get(1).map_or(a, |r| r.0);
            return Ok(IntentStep::Pause(TrackerAction::ask(
                ActionKind::AskClarifyIntent,
                ambiguous_question(a, b),
            )));
        }
        Label::Confirmed => {
            if chosen.kind == IntentKind::Normal {
                match state.active_intent.clone() {
                    None => state.record(RecordKind::Adopt, &chosen.id, None, None),
                    Some(active) if active != chosen.id && detect_intent_shift(state, nlu) => {
                        state.record(RecordKind::Shift, &chosen.id, None, None);
                        for (slot, fill) in state.fills.clone() {
                            if chosen.has_slot(&slot) {
                                state.record(RecordKind::Carry, &chosen.id, Some(&slot), Some(&fill.value));
                            } else {
                                state.record(RecordKind::Drop, &chosen.id, Some(&slot), None);
                            }
                        }
                    }
                    Some(_) => {}
                }
            }
            return Ok(IntentStep::Proceed);
        }
    }
    state.record(RecordKind::PendingUnclear, &chosen.id, None, None);
    Ok(IntentStep::Pause(TrackerAction::ask(
        ActionKind::AskClarifyUnclear,
        UNCLEAR_QUESTION.to_string(),
    )))
}

/// Rule 5: an extracted value. Slots outside the active schema are ignored.
pub(crate) fn fill_extracted(state: &mut DialogueState, schema: &IntentSchema, slot: &str, value: &str) {
    if schema.has_slot(slot) {
        state.record(RecordKind::FillExtracted, &schema.id, Some(slot), Some(value));
    }
}

/// Rule 6: a "don't care" slot takes the schema default.
pub(crate) fn fill_dont_care(state: &mut DialogueState, schema: &IntentSchema, slot: &str) {
    if let Some(def) = schema.slot(slot) {
        state.record(RecordKind::FillDontCare, &schema.id, Some(slot), Some(def.dont_care_value()));
    }
}

/// Rules 7–8: ask for the first missing mandatory slot or complete.
pub(crate) fn conclude(state: &DialogueState, ontology: &Ontology) -> Result<TrackerAction, TrackerError> {
    let result = emit_result(state, ontology)?;
    Ok(match result.followup.clone() {
        Some(q) => TrackerAction::ask(ActionKind::AskFollowup, q),
        None => TrackerAction {
            kind: ActionKind::Complete,
            question: None,
            result: Some(result),
        },
    })
}

/// Advances the dialogue by one user turn.
pub fn update(
    state: &DialogueState,
    nlu: &NluOutput,
    verdict: &ValidationVerdict,
    ontology: &Ontology,
) -> Result<(DialogueState, TrackerAction), TrackerError> {
    let mut st = state.clone();
    if let IntentStep::Pause(action) = begin_turn(&mut st, nlu, verdict, ontology)? {
        return Ok((st, action));
    }
    let schema = st.active_schema(ontology)?;
    for (slot, value) in &nlu.slots {
        fill_extracted(&mut st, schema, slot, value);
    }
    for slot in &nlu.dont_care_slots {
        fill_dont_care(&mut st, schema, slot);
    }
    let action = conclude(&st, ontology)?;
    Ok((st, action))
}

pub fn emit_result(state: &DialogueState, ontology: &Ontology) -> Result<DstResult, TrackerError> {
    let schema = state.active_schema(ontology)?;
    let values = state.filled_values();
    let sql = build_query(schema, &values)?;
    let missing = schema.missing_mandatory(values.keys())?;
    let followup = match missing.first() {
        Some(slot) => Some(
            ontology
                .pick_followup_question(&schema.id, slot, question_seed(state.rng_seed, state.turn_no))?
                .to_string(),
        ),
        None => None,
    };
    Ok(DstResult {
        dialogue_status: if followup.is_some() {
            DialogueStatus::InProgress
        } else {
            DialogueStatus::Complete
        },
        intent: schema.id.clone(),
        state: values,
        sql,
        followup,
    })
}
