//! Per-turn NLU: the scheduled input built from the conversation so far,
//! the output contract, and the backends that fill it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::Turn;
use crate::http::HttpError;
use crate::ontology::Ontology;

pub mod lexicon;
mod remote;

pub use lexicon::{build_lexicon_backend, normalize, LexiconBackend, LexiconRules};
pub use remote::RemoteNlu;

#[derive(Debug, thiserror::Error)]
pub enum NluError {
    #[error("malformed lexicon: {0}")]
    MalformedRules(String),
    #[error("lexicon references unknown {kind} `{id}`")]
    DanglingReference { kind: &'static str, id: String },
    #[error("NLU backend unavailable: {0}")]
    Unavailable(#[from] HttpError),
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("no gold annotation for user turn {0}")]
    NoGold(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleLine {
    pub utterance: String,
    pub intent: Option<String>,
}

/// Prior user utterances with their resolved intents, plus the current one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleInput {
    pub lines: Vec<ScheduleLine>,
    pub current: String,
}

/// Builds the schedule from prior user turns (system turns never enter it).
pub fn build_schedule<I, U>(history: I, current: impl Into<String>) -> ScheduleInput
where
    I: IntoIterator<Item = (U, Option<String>)>,
    U: Into<String>,
{
    let current = current.into();
    debug_assert!(!current.trim().is_empty(), "current utterance is empty");
    ScheduleInput {
        lines: history
            .into_iter()
            .map(|(u, intent)| ScheduleLine {
                utterance: u.into(),
                intent,
            })
            .collect(),
        current,
    }
}

impl ScheduleInput {
    /// Each prior line as `<utterance> ⟨intent=<id>⟩`; `?` marks an
    /// unresolved turn.
    pub fn rendered_lines(&self) -> Vec<String> {
        self.lines
            .iter()
            .map(|l| {
                format!(
                    "{} ⟨intent={}⟩",
                    l.utterance,
                    l.intent.as_deref().unwrap_or("?")
                )
            })
            .collect()
    }

    /// Prior lines followed by the bare current utterance, newline-joined.
    pub fn render(&self) -> String {
        let mut lines = self.rendered_lines();
        lines.push(self.current.clone());
        lines.join("\n")
    }

    /// Schedule containing only the current utterance.
    pub fn current_only(&self) -> ScheduleInput {
        ScheduleInput {
            lines: Vec::new(),
            current: self.current.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NluOutput {
    /// Intent distribution of the full-history run.
    pub scores: BTreeMap<String, f64>,
    pub slots: BTreeMap<String, String>,
    pub dont_care_slots: BTreeSet<String>,
    /// Argmax of the run over the current utterance alone.
    pub turn_local_intent: String,
    /// Argmax of the run over the whole schedule.
    pub context_intent: String,
}

/// Intents sorted by descending score, ties by ascending id.
pub fn rank(scores: &BTreeMap<String, f64>) -> Vec<(&str, f64)> {
    let mut v: Vec<(&str, f64)> = scores.iter().map(|(k, s)| (k.as_str(), *s)).collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    v
}

pub fn argmax(scores: &BTreeMap<String, f64>) -> Option<&str> {
    rank(scores).first().map(|(id, _)| *id)
}

impl NluOutput {
    pub fn ranked(&self) -> Vec<(&str, f64)> {
        rank(&self.scores)
    }

    /// A one-hot output; what an oracle NLU would emit.
    pub fn one_hot(ontology: &Ontology, intent: &str) -> NluOutput {
        let scores = ontology
            .intent_ids()
            .map(|id| (id.to_string(), if id == intent { 1.0 } else { 0.0 }))
            .collect();
        NluOutput {
            scores,
            slots: BTreeMap::new(),
            dont_care_slots: BTreeSet::new(),
            turn_local_intent: intent.to_string(),
            context_intent: intent.to_string(),
        }
    }

    /// Checks the output contract against `ontology`.
    pub fn check(&self, ontology: &Ontology) -> Result<(), NluError> {
        let bad = |m: String| Err(NluError::MalformedResponse(m));
        let mut sum = 0.0;
        for (id, s) in &self.scores {
            if ontology.get_intent(id).is_none() {
                return bad(format!("unknown intent `{id}` in scores"));
            }
            if !(s.is_finite() && *s >= 0.0) {
                return bad(format!("invalid score {s} for `{id}`"));
            }
            sum += s;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("scores sum to {sum}"));
        }
        if let Some(s) = self.dont_care_slots.iter().find(|s| self.slots.contains_key(*s)) {
            return bad(format!("slot `{s}` both extracted and dont_care"));
        }
        let top = self.ranked().first().map(|(_, s)| *s).unwrap_or(0.0);
        if self.scores.get(&self.context_intent).copied() != Some(top) {
            return bad(format!("context intent `{}` is not an argmax", self.context_intent));
        }
        if ontology.get_intent(&self.turn_local_intent).is_none() {
            return bad(format!("unknown turn-local intent `{}`", self.turn_local_intent));
        }
        Ok(())
    }
}

pub trait NluBackend: Send + Sync {
    fn predict(&self, ontology: &Ontology, schedule: &ScheduleInput) -> Result<NluOutput, NluError>;
}

impl<T: NluBackend + ?Sized> NluBackend for Box<T> {
    fn predict(&self, ontology: &Ontology, schedule: &ScheduleInput) -> Result<NluOutput, NluError> {
        (**self).predict(ontology, schedule)
    }
}

impl<T: NluBackend + ?Sized> NluBackend for &T {
    fn predict(&self, ontology: &Ontology, schedule: &ScheduleInput) -> Result<NluOutput, NluError> {
        (**self).predict(ontology, schedule)
    }
}

impl<T: NluBackend + ?Sized> NluBackend for std::sync::Arc<T> {
    fn predict(&self, ontology: &Ontology, schedule: &ScheduleInput) -> Result<NluOutput, NluError> {
        (**self).predict(ontology, schedule)
    }
}

/// Echoes the gold annotations of one dialogue's user turns. The user turn
/// is identified by the number of prior lines in the schedule.
#[derive(Debug, Clone)]
pub struct GoldEcho {
    turns: Vec<Turn>,
}

impl GoldEcho {
    pub fn new<'a>(turns: impl IntoIterator<Item = &'a Turn>) -> Self {
        GoldEcho {
            turns: turns.into_iter().filter(|t| t.is_user()).cloned().collect(),
        }
    }
}

impl NluBackend for GoldEcho {
    fn predict(&self, ontology: &Ontology, schedule: &ScheduleInput) -> Result<NluOutput, NluError> {
        let idx = schedule.lines.len();
        let turn = self.turns.get(idx).ok_or(NluError::NoGold(idx))?;
        let intent = turn.gold_intent.as_deref().ok_or(NluError::NoGold(idx))?;
        let mut out = NluOutput::one_hot(ontology, intent);
        out.slots = turn.gold_slots.clone();
        out.dont_care_slots = turn.gold_dont_care.clone();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_history_schedule() {
        let s = build_schedule(Vec::<(String, Option<String>)>::new(), "weather in Tehran?");
        assert!(s.lines.is_empty());
        assert_eq!(s.current, "weather in Tehran?");
        assert_eq!(s.render(), "weather in Tehran?");
    }

    #[test]
    fn one_line_schedule() {
        let s = build_schedule(
            vec![("find me food", Some("find_restaurant".to_string()))],
            "in Tehran",
        );
        assert_eq!(s.lines.len(), 1);
        assert_eq!(s.lines[0].utterance, "find me food");
        assert_eq!(s.lines[0].intent.as_deref(), Some("find_restaurant"));
        assert_eq!(s.render(), "find me food ⟨intent=find_restaurant⟩\nin Tehran");
    }

    #[test]
    fn three_lines_keep_order() {
        let hist = vec![
            ("a", Some("x".to_string())),
            ("b", None),
            ("c", Some("y".to_string())),
        ];
        let s = build_schedule(hist, "d");
        let utts: Vec<_> = s.lines.iter().map(|l| l.utterance.as_str()).collect();
        assert_eq!(utts, ["a", "b", "c"]);
        assert_eq!(s.rendered_lines()[1], "b ⟨intent=?⟩");
    }

    #[test]
    fn rank_breaks_ties_by_id() {
        let scores: BTreeMap<String, f64> =
            [("b".to_string(), 0.4), ("a".to_string(), 0.4), ("c".to_string(), 0.2)]
                .into_iter()
                .collect();
        let r = rank(&scores);
        assert_eq!(r[0].0, "a");
        assert_eq!(r[1].0, "b");
    }
}
