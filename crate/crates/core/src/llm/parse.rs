//! Strict parsing of model replies into [`DstResult`], with one repair pass.

use serde_json::Value;

use super::LlmError;
use crate::ontology::Ontology;
use crate::querygen::build_query;
use crate::tracker::{DialogueStatus, DstResult};

pub const REQUIRED_KEYS: [&str; 4] = ["intent", "state", "sql", "dialogue_status"];

/// Drops markdown fences and anything outside the outermost braces.
pub fn repair(raw: &str) -> &str {
    let mut s = raw.trim();
    if let Some(open) = s.find("```") {
        let after = &s[open + 3..];
        // skip the info string (`json`) up to the end of the fence line
        let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
        let body = &after[body_start..];
        s = match body.find("```") {
            Some(close) => &body[..close],
            None => body,
        };
    }
    match (s.find('{'), s.rfind('}')) {
        (Some(a), Some(b)) if a < b => &s[a..=b],
        _ => s.trim(),
    }
}

pub fn parse_structured_output(raw: &str) -> Result<DstResult, LlmError> {
    let text = repair(raw);
    let value: Value = serde_json::from_str(text).map_err(|e| LlmError::Unparseable(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| LlmError::Unparseable("reply is not a JSON object".into()))?;
    for key in REQUIRED_KEYS {
        if !obj.contains_key(key) {
            return Err(LlmError::MissingKey(key));
        }
    }
    let result: DstResult =
        serde_json::from_value(value).map_err(|e| LlmError::Unparseable(e.to_string()))?;
    if result.sql.placeholder_count() != result.sql.params.len() {
        return Err(LlmError::Invalid(format!(
            "sql has {} placeholders but {} params",
            result.sql.placeholder_count(),
            result.sql.params.len()
        )));
    }
    match (result.dialogue_status, &result.followup) {
        (DialogueStatus::Complete, Some(_)) => {
            return Err(LlmError::Invalid("complete result carries a followup".into()))
        }
        (DialogueStatus::InProgress, None) => {
            return Err(LlmError::Invalid("in-progress result has no followup".into()))
        }
        _ => {}
    }
    Ok(result)
}

/// Checks a parsed result against the ontology: known intent and slots,
/// nonempty values, mandatory coverage when complete, and the SQL the
/// query generator would build.
pub fn check_result(result: &DstResult, ontology: &Ontology) -> Result<(), LlmError> {
    let schema = ontology
        .get_intent(&result.intent)
        .ok_or_else(|| LlmError::Invalid(format!("unknown intent `{}`", result.intent)))?;
    for (slot, value) in &result.state {
        if !schema.has_slot(slot) {
            return Err(LlmError::Invalid(format!("intent `{}` has no slot `{slot}`", schema.id)));
        }
        if value.trim().is_empty() {
            return Err(LlmError::Invalid(format!("slot `{slot}` has an empty value")));
        }
    }
    let missing = schema.missing_mandatory(result.state.keys()).map_err(|e| LlmError::Invalid(e.to_string()))?;
    if result.dialogue_status == DialogueStatus::Complete && !missing.is_empty() {
        return Err(LlmError::Invalid(format!("complete result lacks mandatory slot `{}`", missing[0])));
    }
    let expected = build_query(schema, &result.state).map_err(|e| LlmError::Invalid(e.to_string()))?;
    if expected != result.sql {
        return Err(LlmError::Invalid("sql does not match the state".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::querygen::SqlQuery;
    use std::collections::BTreeMap;

    fn sample() -> DstResult {
        DstResult {
            dialogue_status: DialogueStatus::Complete,
            intent: "get_weather".into(),
            state: BTreeMap::from([("city".into(), "Tehran".into())]),
            sql: SqlQuery {
                text: "SELECT * FROM get_weather WHERE city = ?".into(),
                params: vec!["Tehran".into()],
            },
            followup: None,
        }
    }

    #[test]
    fn round_trip() {
        let r = sample();
        assert_eq!(parse_structured_output(&r.to_json()).unwrap(), r);
    }

    #[test]
    fn fenced_reply_is_repaired() {
        let r = sample();
        let raw = format!("Sure! Here it is:\n```json\n{}\n```\nHope that helps.", r.to_json());
        assert_eq!(parse_structured_output(&raw).unwrap(), r);
        let loose = format!("result: {} -- end", r.to_json());
        assert_eq!(parse_structured_output(&loose).unwrap(), r);
    }

    #[test]
    fn names_the_missing_key() {
        let e = parse_structured_output(r#"{"intent":"x"}"#).unwrap_err();
        assert_eq!(e.to_string(), "missing key: state");
    }

    #[test]
    fn garbage_is_unparseable() {
        assert!(matches!(parse_structured_output("no json here"), Err(LlmError::Unparseable(_))));
    }

    #[test]
    fn invariants_enforced() {
        let mut r = sample();
        r.sql.params.clear();
        assert!(matches!(parse_structured_output(&r.to_json()), Err(LlmError::Invalid(_))));
        let mut r = sample();
        r.followup = Some("Which city?".into());
        assert!(matches!(parse_structured_output(&r.to_json()), Err(LlmError::Invalid(_))));
    }

    #[test]
    fn ontology_checks() {
        let o = crate::demo::ontology();
        check_result(&sample(), o).unwrap();
        let mut r = sample();
        r.state.clear();
        r.sql = SqlQuery {
            text: "SELECT * FROM get_weather".into(),
            params: vec![],
        };
        assert!(check_result(&r, o).is_err());
        let mut r = sample();
        r.state.insert("cuisine".into(), "kebab".into());
        assert!(check_result(&r, o).is_err());
    }
}
