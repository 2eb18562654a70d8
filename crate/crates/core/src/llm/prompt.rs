//! Per-intent prompt templates with a wildcard fallback.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::LlmError;
use crate::nlu::ScheduleInput;
use crate::ontology::{IntentSchema, Ontology};
use crate::tracker::DialogueState;

pub const WILDCARD: &str = "*";

/// Placeholders a template may use.
pub const PLACEHOLDERS: [&str; 4] = ["schedule", "state", "schema", "output_spec"];

/// Shape of the reply expected from the model; substituted for `{output_spec}`.
pub const OUTPUT_SPEC: &str = r#"Reply with one JSON object and nothing else:
{
  "dialogue_status": "in_progress" | "complete",
  "intent": string,
  "state": { slot_id: string },
  "sql": { "text": string, "params": [string] },
  "followup": string | null
}
"sql.text" is SELECT * FROM <intent> with one "<slot> = ?" per constrained slot; values go in "params"."#;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub intent_id: String,
    pub system_text: String,
    pub user_text: String,
    #[serde(default)]
    pub exemplars: Vec<Exemplar>,
}

/// A rendered prompt, split into the two chat messages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub system: String,
    pub user: String,
}

impl RenderedPrompt {
    /// The prompt as a single string; what the canned backend hashes.
    pub fn text(&self) -> String {
        format!("{}\n\n{}", self.system, self.user)
    }

    pub fn digest(&self) -> String {
        super::sha256_hex(&self.text())
    }
}

/// Names of `{name}` tokens in `text`, where `name` is `[a-z_]+`. JSON
/// braces in templates never match since they are followed by a quote or
/// whitespace.
fn placeholders(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        rest = &rest[open + 1..];
        let end = rest
            .find(|c: char| !(c.is_ascii_lowercase() || c == '_'))
            .unwrap_or(rest.len());
        if end > 0 && rest[end..].starts_with('}') {
            out.push(&rest[..end]);
        }
    }
    out
}

impl PromptTemplate {
    pub fn check(&self) -> Result<(), LlmError> {
        for text in [&self.system_text, &self.user_text] {
            for p in placeholders(text) {
                if !PLACEHOLDERS.contains(&p) {
                    return Err(LlmError::Template(format!(
                        "template `{}` uses unknown placeholder {{{p}}}",
                        self.intent_id
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct PromptLibrary {
    templates: Vec<PromptTemplate>,
}

impl PromptLibrary {
    pub fn new(templates: Vec<PromptTemplate>) -> Result<Self, LlmError> {
        let mut seen = BTreeSet::new();
        for t in &templates {
            t.check()?;
            if !seen.insert(t.intent_id.as_str()) {
                return Err(LlmError::Template(format!("duplicate template for `{}`", t.intent_id)));
            }
        }
        if !seen.contains(WILDCARD) {
            return Err(LlmError::Template("library has no wildcard template".into()));
        }
        Ok(PromptLibrary { templates })
    }

    pub fn from_json(text: &str) -> Result<Self, LlmError> {
        let templates: Vec<PromptTemplate> =
            serde_json::from_str(text).map_err(|e| LlmError::Template(e.to_string()))?;
        PromptLibrary::new(templates)
    }

    /// Rejects templates for intents the ontology does not define.
    pub fn check_intents(&self, ontology: &Ontology) -> Result<(), LlmError> {
        match self
            .templates
            .iter()
            .find(|t| t.intent_id != WILDCARD && ontology.get_intent(&t.intent_id).is_none())
        {
            Some(t) => Err(LlmError::Template(format!("template for unknown intent `{}`", t.intent_id))),
            None => Ok(()),
        }
    }

    pub fn templates(&self) -> &[PromptTemplate] {
        &self.templates
    }

    pub fn select(&self, intent: &str) -> &PromptTemplate {
        select_prompt(&self.templates, intent).expect("library has a wildcard")
    }
}

/// Exact match first, then the wildcard.
pub fn select_prompt<'a>(library: &'a [PromptTemplate], intent: &str) -> Option<&'a PromptTemplate> {
    library
        .iter()
        .find(|t| t.intent_id == intent)
        .or_else(|| library.iter().find(|t| t.intent_id == WILDCARD))
}

fn substitute(text: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    'outer: while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        for (name, value) in values {
            let token = format!("{{{name}}}");
            if tail.starts_with(&token) {
                out.push_str(value);
                rest = &tail[token.len()..];
                continue 'outer;
            }
        }
        out.push('{');
        rest = &tail[1..];
    }
    out.push_str(rest);
    out
}

pub fn render_prompt(
    template: &PromptTemplate,
    schedule: &ScheduleInput,
    state: &DialogueState,
    schema: &IntentSchema,
) -> Result<RenderedPrompt, LlmError> {
    template.check()?;
    let schedule_text = schedule.render();
    let state_text = serde_json::to_string(&state.filled_values()).expect("map serializes");
    let schema_text = serde_json::to_string(schema).expect("schema serializes");
    let values = [
        ("schedule", schedule_text.as_str()),
        ("state", state_text.as_str()),
        ("schema", schema_text.as_str()),
        ("output_spec", OUTPUT_SPEC),
    ];
    let mut user = String::new();
    for ex in &template.exemplars {
        user.push_str("Example input:\n");
        user.push_str(&ex.input);
        user.push_str("\nExample output:\n");
        user.push_str(&ex.output);
        user.push_str("\n\n");
    }
    user.push_str(&substitute(&template.user_text, &values));
    Ok(RenderedPrompt {
        system: substitute(&template.system_text, &values),
        user,
    })
}
