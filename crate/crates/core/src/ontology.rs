//! Domain / intent / slot ontology and the per-slot follow-up question bank.
//!
//! The on-disk form is a single JSON document with `domains`, `intents` and
//! `questions` arrays. [`parse_ontology`] checks every structural rule before
//! handing out an [`Ontology`], so the rest of the crate can index it freely.

use std::collections::HashSet;
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Value written into a free-text slot when the user does not care.
pub const ANY_VALUE: &str = "*";

/// Upper bound on the slots of a normal intent.
pub const MAX_SLOTS: usize = 4;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OntologyError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{element}: {message}")]
    Semantic { element: String, message: String },
    #[error("unknown intent `{0}`")]
    UnknownIntent(String),
    #[error("unknown slot `{slot}` for intent `{intent}`")]
    UnknownSlot { intent: String, slot: String },
    #[error("no follow-up questions for ({intent}, {slot})")]
    NoQuestions { intent: String, slot: String },
}

impl OntologyError {
    fn semantic(element: impl Into<String>, message: impl Into<String>) -> Self {
        OntologyError::Semantic {
            element: element.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntentKind {
    Normal,
    DontCare,
    OutOfDomain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotDef {
    pub id: String,
    /// Display name, usually Persian.
    pub name: String,
    pub mandatory: bool,
    /// Canonical values. Empty means a free-text slot.
    #[serde(rename = "values", default)]
    pub value_list: Vec<String>,
    #[serde(default)]
    pub default_index: usize,
}

impl SlotDef {
    pub fn is_free_text(&self) -> bool {
        self.value_list.is_empty()
    }

    /// The value used when the user explicitly does not care.
    pub fn dont_care_value(&self) -> &str {
        self.value_list
            .get(self.default_index)
            .map(String::as_str)
            .unwrap_or(ANY_VALUE)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentSchema {
    pub id: String,
    pub domain: String,
    #[serde(rename = "special", default = "normal_kind")]
    pub kind: IntentKind,
    #[serde(default)]
    pub slots: Vec<SlotDef>,
}

fn normal_kind() -> IntentKind {
    IntentKind::Normal
}

impl IntentSchema {
    pub fn is_normal(&self) -> bool {
        self.kind == IntentKind::Normal
    }

    pub fn slot(&self, id: &str) -> Option<&SlotDef> {
        self.slots.iter().find(|s| s.id == id)
    }

    pub fn has_slot(&self, id: &str) -> bool {
        self.slot(id).is_some()
    }

    pub fn mandatory_ids(&self) -> impl Iterator<Item = &str> {
        self.slots
            .iter()
            .filter(|s| s.mandatory)
            .map(|s| s.id.as_str())
    }

    /// Mandatory slot ids absent from `filled`, in declaration order.
    ///
    /// Every id in `filled` must belong to this schema.
    pub fn missing_mandatory<I, S>(&self, filled: I) -> Result<Vec<&str>, OntologyError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut have = HashSet::new();
        for id in filled {
            let id = id.as_ref();
            if !self.has_slot(id) {
                return Err(OntologyError::UnknownSlot {
                    intent: self.id.clone(),
                    slot: id.to_string(),
                });
            }
            have.insert(id.to_string());
        }
        Ok(self
            .mandatory_ids()
            .filter(|id| !have.contains(*id))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct QuestionSet {
    intent: String,
    slot: String,
    texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct OntologyDoc {
    domains: Vec<String>,
    intents: Vec<IntentSchema>,
    #[serde(default)]
    questions: Vec<QuestionSet>,
}

/// A validated ontology. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ontology {
    domains: Vec<String>,
    intents: IndexMap<String, IntentSchema>,
    questions: IndexMap<(String, String), Vec<String>>,
}

/// Identifiers double as SQL table and column names, so they are kept to a
/// conservative alphabet.
pub fn is_valid_identifier(id: &str) -> bool {
    let mut chars = id.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase())
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

/// Parses and validates an ontology document.
pub fn parse_ontology(text: &str) -> Result<Ontology, OntologyError> {
    let doc: OntologyDoc = serde_json::from_str(text).map_err(|e| OntologyError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    Ontology::from_doc(doc)
}

impl Ontology {
    fn from_doc(doc: OntologyDoc) -> Result<Self, OntologyError> {
        let mut domains = HashSet::new();
        for d in &doc.domains {
            if !domains.insert(d.as_str()) {
                return Err(OntologyError::semantic(
                    format!("domain `{d}`"),
                    "duplicate domain",
                ));
            }
        }

        let mut intents = IndexMap::new();
        let mut dont_care = 0;
        for intent in doc.intents {
            let element = format!("intent `{}`", intent.id);
            if !is_valid_identifier(&intent.id) {
                return Err(OntologyError::semantic(element, "invalid identifier"));
            }
            if !domains.contains(intent.domain.as_str()) {
                return Err(OntologyError::semantic(
                    element,
                    format!("undeclared domain `{}`", intent.domain),
                ));
            }
            match intent.kind {
                IntentKind::Normal if intent.slots.len() > MAX_SLOTS => {
                    return Err(OntologyError::semantic(
                        element,
                        format!("slot count exceeds {MAX_SLOTS}"),
                    ));
                }
                IntentKind::Normal => {}
                _ if !intent.slots.is_empty() => {
                    return Err(OntologyError::semantic(
                        element,
                        "special intent must not declare slots",
                    ));
                }
                IntentKind::DontCare => dont_care += 1,
                IntentKind::OutOfDomain => {}
            }
            let mut slot_ids = HashSet::new();
            for slot in &intent.slots {
                let element = format!("slot `{}.{}`", intent.id, slot.id);
                if !is_valid_identifier(&slot.id) {
                    return Err(OntologyError::semantic(element, "invalid identifier"));
                }
                if !slot_ids.insert(slot.id.as_str()) {
                    return Err(OntologyError::semantic(element, "duplicate slot id"));
                }
                let mut seen = HashSet::new();
                if let Some(v) = slot.value_list.iter().find(|v| !seen.insert(v.as_str())) {
                    return Err(OntologyError::semantic(
                        element,
                        format!("duplicate value `{v}`"),
                    ));
                }
                if !slot.value_list.is_empty() && slot.default_index >= slot.value_list.len() {
                    return Err(OntologyError::semantic(
                        element,
                        "default_index out of range",
                    ));
                }
            }
            if intents.contains_key(&intent.id) {
                return Err(OntologyError::semantic(element, "duplicate intent id"));
            }
            intents.insert(intent.id.clone(), intent);
        }
        match dont_care {
            0 => {
                return Err(OntologyError::semantic(
                    "ontology",
                    "missing dont_care intent",
                ))
            }
            1 => {}
            _ => {
                return Err(OntologyError::semantic(
                    "ontology",
                    "more than one dont_care intent",
                ))
            }
        }

        let mut questions = IndexMap::new();
        for q in doc.questions {
            let element = format!("question ({}, {})", q.intent, q.slot);
            let slot = intents
                .get(&q.intent)
                .ok_or_else(|| OntologyError::semantic(&element, "unknown intent"))?
                .slot(&q.slot)
                .ok_or_else(|| OntologyError::semantic(&element, "unknown slot"))?;
            if !slot.mandatory {
                return Err(OntologyError::semantic(
                    element,
                    "question bound to non-mandatory slot",
                ));
            }
            if q.texts.is_empty() {
                return Err(OntologyError::semantic(element, "empty question list"));
            }
            if questions
                .insert((q.intent.clone(), q.slot.clone()), q.texts)
                .is_some()
            {
                return Err(OntologyError::semantic(element, "duplicate question key"));
            }
        }
        for intent in intents.values().filter(|i| i.is_normal()) {
            for slot in intent.mandatory_ids() {
                if !questions.contains_key(&(intent.id.clone(), slot.to_string())) {
                    return Err(OntologyError::semantic(
                        format!("slot `{}.{}`", intent.id, slot),
                        "mandatory slot has no follow-up questions",
                    ));
                }
            }
        }

        Ok(Ontology {
            domains: doc.domains,
            intents,
            questions,
        })
    }

    fn to_doc(&self) -> OntologyDoc {
        OntologyDoc {
            domains: self.domains.clone(),
            intents: self.intents.values().cloned().collect(),
            questions: self
                .questions
                .iter()
                .map(|((intent, slot), texts)| QuestionSet {
                    intent: intent.clone(),
                    slot: slot.clone(),
                    texts: texts.clone(),
                })
                .collect(),
        }
    }

    /// Compact JSON serialization. `parse_ontology(&o.to_json())` yields `o`.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_doc()).expect("ontology serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.to_doc()).expect("ontology serializes")
    }

    /// Hex SHA-256 of the compact serialization; corpora reference it.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn intents(&self) -> impl Iterator<Item = &IntentSchema> {
        self.intents.values()
    }

    pub fn intent_ids(&self) -> impl Iterator<Item = &str> {
        self.intents.keys().map(String::as_str)
    }

    pub fn intent_count(&self) -> usize {
        self.intents.len()
    }

    pub fn intent(&self, id: &str) -> Result<&IntentSchema, OntologyError> {
        self.intents
            .get(id)
            .ok_or_else(|| OntologyError::UnknownIntent(id.to_string()))
    }

    pub fn get_intent(&self, id: &str) -> Option<&IntentSchema> {
        self.intents.get(id)
    }

    pub fn normal_intents(&self) -> impl Iterator<Item = &IntentSchema> {
        self.intents.values().filter(|i| i.is_normal())
    }

    pub fn dont_care_intent(&self) -> &IntentSchema {
        self.intents
            .values()
            .find(|i| i.kind == IntentKind::DontCare)
            .expect("validated ontology has a dont_care intent")
    }

    pub fn kind_of(&self, id: &str) -> Option<IntentKind> {
        self.intents.get(id).map(|i| i.kind)
    }

    pub fn questions(&self, intent: &str, slot: &str) -> Option<&[String]> {
        self.questions
            .get(&(intent.to_string(), slot.to_string()))
            .map(Vec::as_slice)
    }

    /// Chooses one follow-up question. The choice depends only on `seed`
    /// and the number of questions for the key.
    pub fn pick_followup_question(
        &self,
        intent: &str,
        slot: &str,
        seed: u64,
    ) -> Result<&str, OntologyError> {
        let list = self
            .questions(intent, slot)
            .ok_or_else(|| OntologyError::NoQuestions {
                intent: intent.to_string(),
                slot: slot.to_string(),
            })?;
        let idx = (splitmix64(seed) % list.len() as u64) as usize;
        Ok(&list[idx])
    }
}

impl fmt::Display for Ontology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} domains, {} intents, {} question sets",
            self.domains.len(),
            self.intents.len(),
            self.questions.len()
        )
    }
}

/// SplitMix64 finalizer; used wherever a seed has to be turned into an index.
pub fn splitmix64(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
