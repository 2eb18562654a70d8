//! MultiWOZ-style annotated dialogue corpora: loading, validation,
//! serialization and dialogue-level k-fold splitting.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ontology::{IntentKind, IntentSchema, Ontology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    #[serde(rename = "intent", default, skip_serializing_if = "Option::is_none")]
    pub gold_intent: Option<String>,
    #[serde(rename = "slots", default, skip_serializing_if = "BTreeMap::is_empty")]
    pub gold_slots: BTreeMap<String, String>,
    #[serde(rename = "dont_care", default, skip_serializing_if = "BTreeSet::is_empty")]
    pub gold_dont_care: BTreeSet<String>,
    #[serde(rename = "state", default, skip_serializing_if = "BTreeMap::is_empty")]
    pub gold_state: BTreeMap<String, String>,
    /// Marks a turn on which the user's goal changes.
    #[serde(default, skip_serializing_if = "is_false")]
    pub shift: bool,
}

impl Turn {
    pub fn user(text: impl Into<String>, intent: impl Into<String>) -> Self {
        Turn {
            speaker: Speaker::User,
            text: text.into(),
            gold_intent: Some(intent.into()),
            gold_slots: BTreeMap::new(),
            gold_dont_care: BTreeSet::new(),
            gold_state: BTreeMap::new(),
            shift: false,
        }
    }

    pub fn system(text: impl Into<String>) -> Self {
        Turn {
            speaker: Speaker::System,
            text: text.into(),
            gold_intent: None,
            gold_slots: BTreeMap::new(),
            gold_dont_care: BTreeSet::new(),
            gold_state: BTreeMap::new(),
            shift: false,
        }
    }

    pub fn is_user(&self) -> bool {
        self.speaker == Speaker::User
    }

    fn has_annotations(&self) -> bool {
        self.gold_intent.is_some()
            || !self.gold_slots.is_empty()
            || !self.gold_dont_care.is_empty()
            || !self.gold_state.is_empty()
            || self.shift
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_hint: Option<String>,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    pub fn user_turns(&self) -> impl Iterator<Item = &Turn> {
        self.turns.iter().filter(|t| t.is_user())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    #[serde(rename = "ontology_checksum")]
    pub ontology_ref: String,
    pub dialogues: Vec<Dialogue>,
}

/// Rule violated by an annotation. `code()` is the stable identifier
/// printed by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AnnotationCode {
    ChecksumMismatch,
    DuplicateDialogue,
    NoUserTurn,
    TurnOrder,
    SystemAnnotated,
    MissingIntent,
    UnknownIntent,
    UnknownSlot,
    DontCareConflict,
    SlotsNotInState,
    NonMonotoneState,
    StateMismatch,
    UnflaggedShift,
    SpuriousShift,
}

impl AnnotationCode {
    pub fn code(self) -> &'static str {
        match self {
            AnnotationCode::ChecksumMismatch => "checksum_mismatch",
            AnnotationCode::DuplicateDialogue => "duplicate_dialogue",
            AnnotationCode::NoUserTurn => "no_user_turn",
            AnnotationCode::TurnOrder => "turn_order",
            AnnotationCode::SystemAnnotated => "system_annotated",
            AnnotationCode::MissingIntent => "missing_intent",
            AnnotationCode::UnknownIntent => "unknown_intent",
            AnnotationCode::UnknownSlot => "unknown_slot",
            AnnotationCode::DontCareConflict => "dont_care_conflict",
            AnnotationCode::SlotsNotInState => "slots_not_in_state",
            AnnotationCode::NonMonotoneState => "non_monotone_state",
            AnnotationCode::StateMismatch => "state_mismatch",
            AnnotationCode::UnflaggedShift => "unflagged_shift",
            AnnotationCode::SpuriousShift => "spurious_shift",
        }
    }

    fn describe(self) -> &'static str {
        match self {
            AnnotationCode::ChecksumMismatch => "ontology checksum mismatch",
            AnnotationCode::DuplicateDialogue => "duplicate dialogue id",
            AnnotationCode::NoUserTurn => "dialogue has no user turn",
            AnnotationCode::TurnOrder => "turns must alternate starting with user",
            AnnotationCode::SystemAnnotated => "system turn carries annotations",
            AnnotationCode::MissingIntent => "user turn without intent",
            AnnotationCode::UnknownIntent => "unknown intent",
            AnnotationCode::UnknownSlot => "slot not in intent schema",
            AnnotationCode::DontCareConflict => "slot both filled and dont_care",
            AnnotationCode::SlotsNotInState => "turn slots not reflected in state",
            AnnotationCode::NonMonotoneState => "non-monotone state without intent shift",
            AnnotationCode::StateMismatch => "state inconsistent with previous state and turn",
            AnnotationCode::UnflaggedShift => "intent change without shift annotation",
            AnnotationCode::SpuriousShift => "shift annotation without intent change",
        }
    }
}

impl fmt::Display for AnnotationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CorpusError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{}", format_annotation(.dialogue, .turn, .code, .detail))]
    Annotation {
        dialogue: String,
        turn: Option<usize>,
        code: AnnotationCode,
        detail: String,
    },
    #[error("k = {k} out of range for {dialogues} dialogues")]
    KOutOfRange { k: usize, dialogues: usize },
}

fn format_annotation(
    dialogue: &str,
    turn: &Option<usize>,
    code: &AnnotationCode,
    detail: &str,
) -> String {
    let mut s = format!("dialogue `{dialogue}`");
    if let Some(t) = turn {
        s.push_str(&format!(", turn {t}"));
    }
    s.push_str(&format!(": {} [{}]", code.describe(), code.code()));
    if !detail.is_empty() {
        s.push_str(": ");
        s.push_str(detail);
    }
    s
}

impl CorpusError {
    pub fn code(&self) -> &'static str {
        match self {
            CorpusError::Syntax { .. } => "syntax",
            CorpusError::Annotation { code, .. } => code.code(),
            CorpusError::KOutOfRange { .. } => "k_out_of_range",
        }
    }
}

fn annotation(
    dialogue: &str,
    turn: Option<usize>,
    code: AnnotationCode,
    detail: impl Into<String>,
) -> CorpusError {
    CorpusError::Annotation {
        dialogue: dialogue.to_string(),
        turn,
        code,
        detail: detail.into(),
    }
}

/// Parses a corpus document and validates it against `ontology`.
pub fn load_corpus(text: &str, ontology: &Ontology) -> Result<Corpus, CorpusError> {
    let corpus: Corpus = serde_json::from_str(text).map_err(|e| CorpusError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    corpus.validate(ontology)?;
    Ok(corpus)
}

impl Corpus {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("corpus serializes")
    }

    pub fn user_turn_count(&self) -> usize {
        self.dialogues.iter().map(|d| d.user_turns().count()).sum()
    }

    pub fn validate(&self, ontology: &Ontology) -> Result<(), CorpusError> {
        let checksum = ontology.checksum();
        if self.ontology_ref != checksum {
            return Err(annotation(
                "*",
                None,
                AnnotationCode::ChecksumMismatch,
                format!("expected {checksum}, found {}", self.ontology_ref),
            ));
        }
        let mut ids = HashSet::new();
        for d in &self.dialogues {
            if !ids.insert(d.id.as_str()) {
                return Err(annotation(&d.id, None, AnnotationCode::DuplicateDialogue, ""));
            }
            validate_dialogue(d, ontology)?;
        }
        Ok(())
    }
}

fn validate_dialogue(d: &Dialogue, ontology: &Ontology) -> Result<(), CorpusError> {
    use AnnotationCode::*;

    if d.user_turns().next().is_none() {
        return Err(annotation(&d.id, None, NoUserTurn, ""));
    }
    let mut task: Option<&IntentSchema> = None;
    let mut state: BTreeMap<String, String> = BTreeMap::new();

    for (idx, turn) in d.turns.iter().enumerate() {
        let err = |code, detail: String| annotation(&d.id, Some(idx), code, detail);
        let expected_speaker = if idx % 2 == 0 {
            Speaker::User
        } else {
            Speaker::System
        };
        if turn.speaker != expected_speaker {
            return Err(err(TurnOrder, String::new()));
        }
        if turn.speaker == Speaker::System {
            if turn.has_annotations() {
                return Err(err(SystemAnnotated, String::new()));
            }
            continue;
        }

        let intent_id = turn
            .gold_intent
            .as_deref()
            .ok_or_else(|| err(MissingIntent, String::new()))?;
        let intent = ontology
            .get_intent(intent_id)
            .ok_or_else(|| err(UnknownIntent, format!("`{intent_id}`")))?;

        let next_task = if intent.kind == IntentKind::Normal {
            Some(intent)
        } else {
            task
        };
        let changed = match (task, next_task) {
            (Some(a), Some(b)) => a.id != b.id,
            _ => false,
        };
        if changed && !turn.shift {
            return Err(err(
                UnflaggedShift,
                format!("`{}` -> `{}`", task.unwrap().id, intent_id),
            ));
        }
        if turn.shift && !changed {
            return Err(err(SpuriousShift, String::new()));
        }

        for slot in turn.gold_slots.keys().chain(turn.gold_dont_care.iter()) {
            if !next_task.is_some_and(|s| s.has_slot(slot)) {
                return Err(err(UnknownSlot, format!("`{slot}`")));
            }
        }
        if let Some(slot) = turn
            .gold_dont_care
            .iter()
            .find(|s| turn.gold_slots.contains_key(*s))
        {
            return Err(err(DontCareConflict, format!("`{slot}`")));
        }
        if let Some((slot, _)) = turn
            .gold_slots
            .iter()
            .find(|(k, v)| turn.gold_state.get(*k) != Some(*v))
        {
            return Err(err(SlotsNotInState, format!("`{slot}`")));
        }

        let mut expected: BTreeMap<String, String> = if turn.shift {
            let schema = next_task.expect("shift implies a task");
            state
                .iter()
                .filter(|(k, _)| schema.has_slot(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect()
        } else {
            if let Some(slot) = state.keys().find(|k| !turn.gold_state.contains_key(*k)) {
                return Err(err(NonMonotoneState, format!("`{slot}` dropped")));
            }
            state.clone()
        };
        expected.extend(turn.gold_slots.clone());
        if let Some(schema) = next_task {
            for slot in &turn.gold_dont_care {
                let def = schema.slot(slot).expect("checked above");
                expected.insert(slot.clone(), def.dont_care_value().to_string());
            }
        }
        if expected != turn.gold_state {
            return Err(err(
                StateMismatch,
                format!(
                    "expected {}",
                    serde_json::to_string(&expected).unwrap_or_default()
                ),
            ));
        }

        state = turn.gold_state.clone();
        task = next_task;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fold {
    pub index: usize,
    pub train: Corpus,
    pub test: Corpus,
}

/// Splits by dialogue into `k` folds whose test sets partition the corpus.
/// Fold sizes differ by at most one and the assignment depends only on
/// `(corpus, k, seed)`.
pub fn split_kfold(corpus: &Corpus, k: usize, seed: u64) -> Result<Vec<Fold>, CorpusError> {
    let n = corpus.dialogues.len();
    if k < 2 || k > n {
        return Err(CorpusError::KOutOfRange { k, dialogues: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for index in 0..k {
        let size = base + usize::from(index < extra);
        let mut in_test = vec![false; n];
        for &i in &order[start..start + size] {
            in_test[i] = true;
        }
        start += size;
        let pick = |want: bool| Corpus {
            ontology_ref: corpus.ontology_ref.clone(),
            dialogues: corpus
                .dialogues
                .iter()
                .zip(&in_test)
                .filter(|(_, &t)| t == want)
                .map(|(d, _)| d.clone())
                .collect(),
        };
        folds.push(Fold {
            index,
            train: pick(false),
            test: pick(true),
        });
    }
    Ok(folds)
}
