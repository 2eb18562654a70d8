//! Client for an NLU service reachable over HTTP.

use std::collections::{BTreeMap, BTreeSet};

use serde::Deserialize;
use serde_json::json;

use super::{argmax, NluBackend, NluError, NluOutput, ScheduleInput};
use crate::http::{post_json, Endpoint};
use crate::ontology::Ontology;

/// Calls `POST /v1/nlu` twice per turn: once with the current utterance
/// alone and once with the full schedule.
#[derive(Debug, Clone)]
pub struct RemoteNlu {
    endpoint: Endpoint,
}

#[derive(Debug, Deserialize)]
struct Reply {
    scores: BTreeMap<String, f64>,
    #[serde(default)]
    slots: BTreeMap<String, String>,
    #[serde(default)]
    dont_care: BTreeSet<String>,
}

impl RemoteNlu {
    pub fn new(endpoint: Endpoint) -> Result<Self, NluError> {
        endpoint.validate()?;
        Ok(RemoteNlu { endpoint })
    }

    fn call(&self, ontology: &Ontology, schedule: &ScheduleInput) -> Result<Reply, NluError> {
        let body = json!({
            "schedule": schedule.rendered_lines(),
            "current": schedule.current,
        });
        let resp = post_json(&self.endpoint, "/v1/nlu", &body)?;
        let mut reply: Reply = serde_json::from_value(resp.body)
            .map_err(|e| NluError::MalformedResponse(e.to_string()))?;
        reply.scores = normalize_scores(ontology, reply.scores)?;
        Ok(reply)
    }
}

/// Fills in intents the service left out with zero, then renormalizes. A
/// distribution that is off by more than 1e-6 is rejected rather than
/// silently rescaled.
fn normalize_scores(
    ontology: &Ontology,
    scores: BTreeMap<String, f64>,
) -> Result<BTreeMap<String, f64>, NluError> {
    let mut out: BTreeMap<String, f64> = ontology.intent_ids().map(|id| (id.to_string(), 0.0)).collect();
    for (id, s) in scores {
        if !(s.is_finite() && s >= 0.0) {
            return Err(NluError::MalformedResponse(format!("invalid score {s} for `{id}`")));
        }
        match out.get_mut(&id) {
            Some(slot) => *slot = s,
            None => return Err(NluError::MalformedResponse(format!("unknown intent `{id}`"))),
        }
    }
    let sum: f64 = out.values().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(NluError::MalformedResponse(format!("scores sum to {sum}")));
    }
    out.values_mut().for_each(|s| *s /= sum);
    Ok(out)
}

impl NluBackend for RemoteNlu {
    fn predict(&self, ontology: &Ontology, schedule: &ScheduleInput) -> Result<NluOutput, NluError> {
        let local = self.call(ontology, &schedule.current_only())?;
        let context = self.call(ontology, schedule)?;
        let out = NluOutput {
            turn_local_intent: argmax(&local.scores).unwrap_or_default().to_string(),
            context_intent: argmax(&context.scores).unwrap_or_default().to_string(),
            scores: context.scores,
            slots: context.slots,
            dont_care_slots: context.dont_care,
        };
        out.check(ontology)?;
        Ok(out)
    }
}
