//! Parameterized SQL for a filled intent: one table per intent, one
//! equality constraint per filled slot, values only ever in `params`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ontology::{IntentSchema, ANY_VALUE};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SqlQuery {
    pub text: String,
    pub params: Vec<String>,
}

impl SqlQuery {
    pub fn placeholder_count(&self) -> usize {
        self.text.matches('?').count()
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum QueryError {
    #[error("intent `{intent}` has no slot `{slot}`")]
    UnknownSlot { intent: String, slot: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryOptions {
    /// Constrain on mandatory slots only.
    #[serde(default)]
    pub mandatory_only: bool,
}

/// Maps an identifier onto `[a-z0-9_]`. Ontology ids already satisfy this,
/// so for them it is the identity.
pub fn sanitize_identifier(id: &str) -> String {
    let s: String = id
        .chars()
        .map(|c| match c.to_ascii_lowercase() {
            c @ ('a'..='z' | '0'..='9' | '_') => c,
            _ => '_',
        })
        .collect();
    if s.is_empty() {
        "_".into()
    } else {
        s
    }
}

pub fn build_query(schema: &IntentSchema, fills: &BTreeMap<String, String>) -> Result<SqlQuery, QueryError> {
    build_query_with(schema, fills, QueryOptions::default())
}

/// `SELECT * FROM <intent>` with `<slot> = ?` clauses in declaration order.
/// Slots filled with the any-value sentinel are left unconstrained.
pub fn build_query_with(
    schema: &IntentSchema,
    fills: &BTreeMap<String, String>,
    opts: QueryOptions,
) -> Result<SqlQuery, QueryError> {
    if let Some(slot) = fills.keys().find(|k| !schema.has_slot(k)) {
        return Err(QueryError::UnknownSlot {
            intent: schema.id.clone(),
            slot: slot.clone(),
        });
    }
    let mut clauses = Vec::new();
    let mut params = Vec::new();
    for slot in &schema.slots {
        if opts.mandatory_only && !slot.mandatory {
            continue;
        }
        match fills.get(&slot.id) {
            Some(v) if v != ANY_VALUE => {
                clauses.push(format!("{} = ?", sanitize_identifier(&slot.id)));
                params.push(v.clone());
            }
            _ => {}
        }
    }
    let mut text = format!("SELECT * FROM {}", sanitize_identifier(&schema.id));
    if !clauses.is_empty() {
        text.push_str(" WHERE ");
        text.push_str(&clauses.join(" AND "));
    }
    Ok(SqlQuery { text, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demo;

    fn fills(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn restaurant_query() {
        let s = demo::ontology().intent("find_restaurant").unwrap();
        let q = build_query(s, &fills(&[("cuisine", "kebab"), ("city", "Tehran")])).unwrap();
        assert_eq!(q.text, "SELECT * FROM find_restaurant WHERE city = ? AND cuisine = ?");
        assert_eq!(q.params, ["Tehran", "kebab"]);
    }

    #[test]
    fn empty_fills() {
        let s = demo::ontology().intent("find_restaurant").unwrap();
        let q = build_query(s, &BTreeMap::new()).unwrap();
        assert_eq!(q.text, "SELECT * FROM find_restaurant");
        assert!(q.params.is_empty());
    }

    #[test]
    fn injection_stays_in_params() {
        let s = demo::ontology().intent("find_restaurant").unwrap();
        let evil = "x' OR '1'='1";
        let q = build_query(s, &fills(&[("city", evil)])).unwrap();
        assert!(!q.text.contains('\''));
        assert_eq!(q.params, [evil]);
    }

    #[test]
    fn any_value_is_unconstrained() {
        let s = demo::ontology().intent("get_showtimes").unwrap();
        let q = build_query(s, &fills(&[("movie", ANY_VALUE), ("city", "Paris")])).unwrap();
        assert_eq!(q.text, "SELECT * FROM get_showtimes WHERE city = ?");
    }

    #[test]
    fn mandatory_only_mode() {
        let s = demo::ontology().intent("find_restaurant").unwrap();
        let f = fills(&[("city", "Tehran"), ("price", "cheap")]);
        let opts = QueryOptions { mandatory_only: true };
        assert_eq!(build_query_with(s, &f, opts).unwrap().params, ["Tehran"]);
        assert_eq!(build_query(s, &f).unwrap().params, ["Tehran", "cheap"]);
    }

    #[test]
    fn unknown_slot() {
        let s = demo::ontology().intent("get_weather").unwrap();
        assert!(build_query(s, &fills(&[("cuisine", "x")])).is_err());
    }

    #[test]
    fn sanitizer() {
        assert_eq!(sanitize_identifier("find_restaurant"), "find_restaurant");
        assert_eq!(sanitize_identifier("Drop Table;--"), "drop_table___");
    }
}
