//! Synthetic annotated corpora built from the ontology and the lexicon, for
//! desk-scale evaluation.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use crate::corpus::{Corpus, Dialogue, Turn};
use crate::nlu::lexicon::{normalize, LexiconRules, SlotRule};
use crate::ontology::{IntentSchema, Ontology};

pub const DONT_CARE_P: f64 = 0.15;
pub const SHIFT_P: f64 = 0.12;
const MAX_USER_TURNS: usize = 8;
/// Tokens tried as values of pattern-extracted slots.
const FREE_TOKENS: [&str; 8] = ["inception", "parasite", "orbit", "nova", "ir655", "ek972", "4821", "1350"];
const CLOSING: &str = "Here is what I found.";

struct SlotSource {
    values: Vec<String>,
    surface: Option<String>,
}

impl SlotSource {
    fn new(rule: &SlotRule) -> Option<Self> {
        if !rule.gazetteer.is_empty() {
            return Some(SlotSource {
                values: rule.gazetteer.clone(),
                surface: rule.surface.clone(),
            });
        }
        let re = Regex::new(rule.pattern.as_deref()?).ok()?;
        let surface = rule.surface.clone()?;
        // keep tokens the pattern reads back unchanged
        let values: Vec<String> = FREE_TOKENS
            .iter()
            .filter(|t| {
                let text = normalize(&surface.replace("{}", t));
                re.captures(&text).and_then(|c| c.get(1)).map(|m| m.as_str()) == Some(**t)
            })
            .map(|t| t.to_string())
            .collect();
        (!values.is_empty()).then_some(SlotSource {
            values,
            surface: Some(surface),
        })
    }

    fn say(&self, value: &str) -> String {
        match &self.surface {
            Some(s) => s.replace("{}", value),
            None => value.to_string(),
        }
    }
}

/// Draws dialogues in which a user states a task, answers the system's
/// follow-up questions (sometimes with "whatever"), and occasionally
/// switches to another task. Output depends only on the inputs.
pub struct CorpusGenerator<'a> {
    ontology: &'a Ontology,
    triggers: BTreeMap<String, Vec<String>>,
    slots: BTreeMap<String, SlotSource>,
    dont_care_phrases: Vec<String>,
}

impl<'a> CorpusGenerator<'a> {
    pub fn new(ontology: &'a Ontology, rules: &LexiconRules) -> Self {
        let triggers = rules
            .intents
            .iter()
            .map(|i| (i.id.clone(), i.triggers.iter().map(|t| t.phrase.clone()).collect()))
            .collect::<BTreeMap<String, Vec<String>>>();
        let dont_care_phrases = triggers
            .get(&ontology.dont_care_intent().id)
            .filter(|p| !p.is_empty())
            .cloned()
            .unwrap_or_else(|| vec!["whatever".into()]);
        CorpusGenerator {
            ontology,
            slots: rules
                .slots
                .iter()
                .filter_map(|r| SlotSource::new(r).map(|s| (r.id.clone(), s)))
                .collect(),
            triggers,
            dont_care_phrases,
        }
    }

    /// Intents the generator can voice: a trigger phrase, at least one slot
    /// with a value source, and a value source for every mandatory slot.
    fn usable(&self) -> Vec<&'a IntentSchema> {
        self.ontology
            .normal_intents()
            .filter(|s| self.triggers.get(&s.id).is_some_and(|t| !t.is_empty()))
            .filter(|s| s.slots.iter().any(|d| self.slots.contains_key(&d.id)))
            .filter(|s| s.mandatory_ids().all(|m| self.slots.contains_key(m)))
            .collect()
    }

    fn trigger(&self, rng: &mut ChaCha8Rng, intent: &str) -> String {
        self.triggers[intent].choose(rng).expect("usable intents have triggers").clone()
    }

    fn value(&self, rng: &mut ChaCha8Rng, slot: &str) -> (String, String) {
        let src = &self.slots[slot];
        let v = src.values.choose(rng).expect("nonempty").clone();
        let said = src.say(&v);
        (v, said)
    }

    pub fn generate(&self, dialogues: usize, seed: u64) -> Corpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let usable = self.usable();
        assert!(!usable.is_empty(), "no intent can be voiced from this lexicon");
        Corpus {
            ontology_ref: self.ontology.checksum(),
            dialogues: (0..dialogues)
                .map(|i| self.dialogue(&mut rng, &usable, format!("gen-{seed}-{i:04}")))
                .collect(),
        }
    }

    fn dialogue(&self, rng: &mut ChaCha8Rng, usable: &[&'a IntentSchema], id: String) -> Dialogue {
        let mut task = *usable.choose(rng).expect("nonempty");
        let mut turns = Vec::new();
        let mut state: BTreeMap<String, String> = BTreeMap::new();
        let mut shifted = false;

        // opening: trigger plus at least one voiced slot
        let mut voiced: Vec<&str> = task.slots.iter().map(|s| s.id.as_str()).filter(|s| self.slots.contains_key(*s)).collect();
        // half the time hold back the first mandatory slot so the system has to ask
        if let Some(first) = task.mandatory_ids().next() {
            if voiced.len() > 1 && rng.gen_bool(0.5) {
                voiced.retain(|s| *s != first);
            }
        }
        let k = rng.gen_range(1..=voiced.len().min(2));
        let mut opening_slots: Vec<&str> = voiced.choose_multiple(rng, k).copied().collect();
        opening_slots.sort_by_key(|s| task.slots.iter().position(|d| d.id == *s));
        let mut words = vec![self.trigger(rng, &task.id)];
        let mut slots = BTreeMap::new();
        for s in opening_slots {
            let (v, said) = self.value(rng, s);
            words.push(said);
            slots.insert(s.to_string(), v);
        }
        state.extend(slots.clone());
        turns.push(user_turn(words.join(" "), &task.id, slots, BTreeSet::new(), &state, false));

        let mut user_turns = 1;
        loop {
            let missing = task.missing_mandatory(state.keys()).expect("state keys are task slots");
            let Some(&ask) = missing.first() else { break };
            if user_turns >= MAX_USER_TURNS {
                break;
            }
            let q = self
                .ontology
                .pick_followup_question(&task.id, ask, rng.gen())
                .expect("ontology has a question for every mandatory slot");
            turns.push(Turn::system(q));
            user_turns += 1;

            if !shifted && rng.gen::<f64>() < SHIFT_P {
                if let Some(next) = self.shift_target(rng, usable, task, &state) {
                    shifted = true;
                    task = next;
                    state.retain(|k, _| task.has_slot(k));
                    let mut words = vec![self.trigger(rng, &task.id)];
                    let mut slots = BTreeMap::new();
                    let fresh: Vec<&str> = task
                        .slots
                        .iter()
                        .map(|s| s.id.as_str())
                        .filter(|s| self.slots.contains_key(*s) && !state.contains_key(*s))
                        .collect();
                    if state.is_empty() || rng.gen_bool(0.5) {
                        if let Some(&s) = fresh.first() {
                            let (v, said) = self.value(rng, s);
                            words.push(said);
                            slots.insert(s.to_string(), v);
                        }
                    }
                    state.extend(slots.clone());
                    turns.push(user_turn(words.join(" "), &task.id, slots, BTreeSet::new(), &state, true));
                    continue;
                }
            }

            if rng.gen::<f64>() < DONT_CARE_P {
                let phrase = self.dont_care_phrases.choose(rng).expect("nonempty").clone();
                let def = task.slot(ask).expect("missing slot is declared");
                state.insert(ask.to_string(), def.dont_care_value().to_string());
                let dc = BTreeSet::from([ask.to_string()]);
                turns.push(user_turn(phrase, &task.id, BTreeMap::new(), dc, &state, false));
            } else {
                let (v, said) = self.value(rng, ask);
                let slots = BTreeMap::from([(ask.to_string(), v)]);
                state.extend(slots.clone());
                turns.push(user_turn(said, &task.id, slots, BTreeSet::new(), &state, false));
            }
        }
        turns.push(Turn::system(CLOSING));
        Dialogue {
            id,
            domain_hint: Some(task.domain.clone()),
            turns,
        }
    }

    /// Another voiced intent, preferring one that shares a filled slot.
    fn shift_target(
        &self,
        rng: &mut ChaCha8Rng,
        usable: &[&'a IntentSchema],
        task: &IntentSchema,
        state: &BTreeMap<String, String>,
    ) -> Option<&'a IntentSchema> {
        let others: Vec<&'a IntentSchema> = usable.iter().copied().filter(|s| s.id != task.id).collect();
        let sharing: Vec<&'a IntentSchema> = others
            .iter()
            .copied()
            .filter(|s| state.keys().any(|k| s.has_slot(k)))
            .collect();
        if sharing.is_empty() {
            others.choose(rng).copied()
        } else {
            sharing.choose(rng).copied()
        }
    }
}

fn user_turn(
    text: String,
    intent: &str,
    slots: BTreeMap<String, String>,
    dont_care: BTreeSet<String>,
    state: &BTreeMap<String, String>,
    shift: bool,
) -> Turn {
    let mut t = Turn::user(text, intent);
    t.gold_slots = slots;
    t.gold_dont_care = dont_care;
    t.gold_state = state.clone();
    t.shift = shift;
    t
}

pub fn generate_corpus(ontology: &Ontology, rules: &LexiconRules, dialogues: usize, seed: u64) -> Corpus {
    CorpusGenerator::new(ontology, rules).generate(dialogues, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demo;

    fn corpus(n: usize, seed: u64) -> Corpus {
        generate_corpus(demo::ontology(), demo::lexicon().rules(), n, seed)
    }

    #[test]
    fn generated_corpus_validates() {
        let c = corpus(200, 1);
        c.validate(demo::ontology()).unwrap();
        assert!(c.dialogues.iter().any(|d| d.turns.iter().any(|t| t.shift)));
        assert!(c.dialogues.iter().any(|d| d.turns.iter().any(|t| !t.gold_dont_care.is_empty())));
    }

    #[test]
    fn every_user_turn_has_state() {
        for d in &corpus(200, 2).dialogues {
            assert!(d.user_turns().all(|t| !t.gold_state.is_empty()), "{}", d.id);
            assert!(!d.turns.last().unwrap().is_user());
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(corpus(20, 7).to_json(), corpus(20, 7).to_json());
        assert_ne!(corpus(20, 7).to_json(), corpus(20, 8).to_json());
    }
}
