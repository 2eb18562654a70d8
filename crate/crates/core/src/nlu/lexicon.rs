//! Deterministic lexicon NLU: weighted trigger phrases, slot gazetteers and
//! extraction patterns, softmax-normalized with a temperature.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{argmax, NluBackend, NluError, NluOutput, ScheduleInput};
use crate::ontology::{IntentKind, IntentSchema, Ontology};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trigger {
    pub phrase: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentRule {
    pub id: String,
    pub triggers: Vec<Trigger>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRule {
    pub id: String,
    #[serde(default)]
    pub gazetteer: Vec<String>,
    /// Regex over the normalized utterance; capture group 1 is the value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    /// Surface template (`{}` = value) used when synthesizing utterances.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surface: Option<String>,
}

fn default_temperature() -> f64 {
    0.5
}
fn default_history_weight() -> f64 {
    2.5
}
fn default_history_decay() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconRules {
    pub intents: Vec<IntentRule>,
    #[serde(default)]
    pub slots: Vec<SlotRule>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Evidence mass the resolved intents of earlier turns contribute to the
    /// context run.
    #[serde(default = "default_history_weight")]
    pub history_weight: f64,
    /// Per-turn decay applied to older schedule lines.
    #[serde(default = "default_history_decay")]
    pub history_decay: f64,
}

/// Lowercases, folds Arabic letter variants into Persian ones, maps Persian
/// digits to ASCII, drops diacritics and turns punctuation and ZWNJ into
/// single spaces.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.chars() {
        let mapped = match c {
            'ي' | 'ى' => Some('ی'),
            'ك' => Some('ک'),
            'ة' => Some('ه'),
            '۰'..='۹' => char::from_u32(c as u32 - '۰' as u32 + '0' as u32),
            '٠'..='٩' => char::from_u32(c as u32 - '٠' as u32 + '0' as u32),
            '\u{064B}'..='\u{065F}' | '\u{0670}' => continue,
            '\'' | '’' => Some('\''),
            c if c.is_alphanumeric() => Some(c),
            _ => None,
        };
        match mapped {
            Some(m) => {
                if pending_space && !out.is_empty() {
                    out.push(' ');
                }
                pending_space = false;
                out.extend(m.to_lowercase());
            }
            None => pending_space = true,
        }
    }
    out
}

/// Byte offset of the first whole-word occurrence of `needle` in `hay`
/// (both normalized).
fn find_word(hay: &str, needle: &str) -> Option<usize> {
    if needle.is_empty() {
        return None;
    }
    let mut from = 0;
    while let Some(pos) = hay[from..].find(needle) {
        let start = from + pos;
        let end = start + needle.len();
        let before_ok = start == 0 || hay[..start].ends_with(' ');
        let after_ok = end == hay.len() || hay[end..].starts_with(' ');
        if before_ok && after_ok {
            return Some(start);
        }
        from = start + hay[start..].chars().next().map_or(1, char::len_utf8);
    }
    None
}

#[derive(Debug)]
struct CompiledSlot {
    id: String,
    /// (normalized form, canonical value)
    gazetteer: Vec<(String, String)>,
    pattern: Option<Regex>,
}

impl CompiledSlot {
    fn extract(&self, norm: &str) -> Option<String> {
        let mut best: Option<(usize, usize, &str)> = None;
        for (form, canonical) in &self.gazetteer {
            if let Some(pos) = find_word(norm, form) {
                let better = match best {
                    None => true,
                    Some((len, p, _)) => form.len() > len || (form.len() == len && pos < p),
                };
                if better {
                    best = Some((form.len(), pos, canonical));
                }
            }
        }
        if let Some((_, _, v)) = best {
            return Some(v.to_string());
        }
        let re = self.pattern.as_ref()?;
        let caps = re.captures(norm)?;
        let value = caps.get(1)?.as_str().trim();
        (!value.is_empty()).then(|| value.to_string())
    }
}

/// A pure, immutable lexicon backend.
#[derive(Debug)]
pub struct LexiconBackend {
    rules: LexiconRules,
    /// intent id -> (normalized phrase, weight)
    triggers: BTreeMap<String, Vec<(String, f64)>>,
    slots: Vec<CompiledSlot>,
    dont_care_id: String,
}

/// Parses a lexicon document and checks it against `ontology`.
pub fn build_lexicon_backend(text: &str, ontology: &Ontology) -> Result<LexiconBackend, NluError> {
    let rules: LexiconRules =
        serde_json::from_str(text).map_err(|e| NluError::MalformedRules(e.to_string()))?;
    LexiconBackend::new(rules, ontology)
}

impl LexiconBackend {
    pub fn new(rules: LexiconRules, ontology: &Ontology) -> Result<Self, NluError> {
        if !(rules.temperature.is_finite() && rules.temperature > 0.0) {
            return Err(NluError::MalformedRules("temperature must be positive".into()));
        }
        if !(rules.history_weight.is_finite() && rules.history_weight >= 0.0) {
            return Err(NluError::MalformedRules("history_weight must be non-negative".into()));
        }
        if !(rules.history_decay > 0.0 && rules.history_decay <= 1.0) {
            return Err(NluError::MalformedRules("history_decay must be in (0, 1]".into()));
        }
        let mut triggers = BTreeMap::new();
        for rule in &rules.intents {
            if ontology.get_intent(&rule.id).is_none() {
                return Err(NluError::DanglingReference {
                    kind: "intent",
                    id: rule.id.clone(),
                });
            }
            let mut compiled = Vec::new();
            for t in &rule.triggers {
                if !(t.weight.is_finite() && t.weight >= 0.0) {
                    return Err(NluError::MalformedRules(format!(
                        "trigger `{}` has invalid weight {}",
                        t.phrase, t.weight
                    )));
                }
                let norm = normalize(&t.phrase);
                if norm.is_empty() {
                    return Err(NluError::MalformedRules(format!(
                        "trigger `{}` is empty after normalization",
                        t.phrase
                    )));
                }
                compiled.push((norm, t.weight));
            }
            if triggers.insert(rule.id.clone(), compiled).is_some() {
                return Err(NluError::MalformedRules(format!("duplicate intent `{}`", rule.id)));
            }
        }
        let known_slots: HashSet<&str> = ontology
            .intents()
            .flat_map(|i| i.slots.iter().map(|s| s.id.as_str()))
            .collect();
        let mut slots = Vec::new();
        for s in &rules.slots {
            if !known_slots.contains(s.id.as_str()) {
                return Err(NluError::DanglingReference {
                    kind: "slot",
                    id: s.id.clone(),
                });
            }
            let pattern = match &s.pattern {
                Some(p) => {
                    let re = Regex::new(p)
                        .map_err(|e| NluError::MalformedRules(format!("slot `{}`: {e}", s.id)))?;
                    if re.captures_len() < 2 {
                        return Err(NluError::MalformedRules(format!(
                            "slot `{}`: pattern needs a capture group",
                            s.id
                        )));
                    }
                    Some(re)
                }
                None => None,
            };
            slots.push(CompiledSlot {
                id: s.id.clone(),
                gazetteer: s
                    .gazetteer
                    .iter()
                    .map(|g| (normalize(g), g.clone()))
                    .filter(|(n, _)| !n.is_empty())
                    .collect(),
                pattern,
            });
        }
        Ok(LexiconBackend {
            rules,
            triggers,
            slots,
            dont_care_id: ontology.dont_care_intent().id.clone(),
        })
    }

    pub fn rules(&self) -> &LexiconRules {
        &self.rules
    }

    /// Sum of matched trigger weights for every ontology intent.
    pub fn trigger_scores(&self, ontology: &Ontology, utterance: &str) -> BTreeMap<String, f64> {
        let norm = normalize(utterance);
        ontology
            .intent_ids()
            .map(|id| {
                let raw = self
                    .triggers
                    .get(id)
                    .map(|ts| {
                        ts.iter()
                            .filter(|(p, _)| find_word(&norm, p).is_some())
                            .map(|(_, w)| w)
                            .sum()
                    })
                    .unwrap_or(0.0);
                (id.to_string(), raw)
            })
            .collect()
    }

    /// Unnormalized scores of the full-schedule run: trigger evidence of the
    /// current utterance plus decayed resolved-intent mass of earlier lines.
    pub fn context_raw(&self, ontology: &Ontology, schedule: &ScheduleInput) -> BTreeMap<String, f64> {
        let mut raw = self.trigger_scores(ontology, &schedule.current);
        let n = schedule.lines.len();
        if n > 0 && self.rules.history_weight > 0.0 {
            let mut total = 0.0;
            let mut mass: HashMap<&str, f64> = HashMap::new();
            for (i, line) in schedule.lines.iter().enumerate() {
                // unresolved lines carry no intent and do not dilute the rest
                if let Some(id) = line.intent.as_deref() {
                    let w = self.rules.history_decay.powi((n - 1 - i) as i32);
                    total += w;
                    *mass.entry(id).or_default() += w;
                }
            }
            for (id, m) in mass {
                if let Some(r) = raw.get_mut(id) {
                    *r += self.rules.history_weight * m / total;
                }
            }
        }
        raw
    }

    pub fn softmax(&self, raw: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
        softmax(raw, self.rules.temperature)
    }

    fn is_dont_care(&self, raw: &BTreeMap<String, f64>) -> bool {
        raw.get(&self.dont_care_id).copied().unwrap_or(0.0) > 0.0
            && argmax(raw) == Some(self.dont_care_id.as_str())
    }

    fn extract(&self, utterance: &str, schema: Option<&IntentSchema>) -> BTreeMap<String, String> {
        let norm = normalize(utterance);
        self.slots
            .iter()
            .filter(|s| schema.is_none_or(|sc| sc.has_slot(&s.id)))
            .filter_map(|s| s.extract(&norm).map(|v| (s.id.clone(), v)))
            .collect()
    }
}

/// Numerically stable softmax at temperature `t`.
pub(crate) fn softmax(raw: &BTreeMap<String, f64>, t: f64) -> BTreeMap<String, f64> {
    let max = raw.values().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = raw.values().map(|r| ((r - max) / t).exp()).collect();
    let sum: f64 = exps.iter().sum();
    raw.keys()
        .cloned()
        .zip(exps.into_iter().map(|e| e / sum))
        .collect()
}

fn normal<'o>(ontology: &'o Ontology, id: Option<&str>) -> Option<&'o IntentSchema> {
    id.and_then(|id| ontology.get_intent(id))
        .filter(|s| s.kind == IntentKind::Normal)
}

impl NluBackend for LexiconBackend {
    fn predict(&self, ontology: &Ontology, schedule: &ScheduleInput) -> Result<NluOutput, NluError> {
        let local_raw = self.trigger_scores(ontology, &schedule.current);
        let ctx_raw = self.context_raw(ontology, schedule);
        let scores = self.softmax(&ctx_raw);
        let local = self.softmax(&local_raw);
        let turn_local_intent = argmax(&local).unwrap_or_default().to_string();
        let context_intent = argmax(&scores).unwrap_or_default().to_string();

        // Replay the earlier lines to learn which slots are already settled;
        // a don't-care utterance resolves the first one still missing.
        let mut task: Option<&IntentSchema> = None;
        let mut settled: BTreeSet<String> = BTreeSet::new();
        for line in &schedule.lines {
            if let Some(next) = normal(ontology, line.intent.as_deref()) {
                if task.is_none_or(|t| t.id != next.id) {
                    settled.retain(|s| next.has_slot(s));
                    task = Some(next);
                }
            }
            settled.extend(self.extract(&line.utterance, task).into_keys());
            if self.is_dont_care(&self.trigger_scores(ontology, &line.utterance)) {
                if let Some(t) = task {
                    if let Some(s) = t.missing_mandatory(settled.iter()).ok().and_then(|m| m.first().map(|s| s.to_string())) {
                        settled.insert(s);
                    }
                }
            }
        }

        let evidence = ctx_raw.values().any(|r| *r > 0.0);
        let current_task = if evidence {
            normal(ontology, Some(&context_intent)).or(task)
        } else {
            task
        };
        if let (Some(cur), Some(prev)) = (current_task, task) {
            if cur.id != prev.id {
                settled.retain(|s| cur.has_slot(s));
            }
        }
        let slots = self.extract(&schedule.current, current_task);
        let mut dont_care_slots = BTreeSet::new();
        if self.is_dont_care(&local_raw) {
            if let Some(t) = current_task {
                let filled = settled.iter().chain(slots.keys());
                if let Some(first) = t.missing_mandatory(filled).ok().and_then(|m| m.first().copied()) {
                    dont_care_slots.insert(first.to_string());
                }
            }
        }
        Ok(NluOutput {
            scores,
            slots,
            dont_care_slots,
            turn_local_intent,
            context_intent,
        })
    }
}
