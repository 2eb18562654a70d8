//! Turn-level benchmark vectors and the goal-accuracy family built on them,
//! plus a plain classification report.
//!
//! Goal accuracies are kept as exact fractions; only the final report
//! converts them to floats.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::Turn;
use crate::tracker::{DialogueState, FillSource};

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum MetricError {
    #[error("no turns to score")]
    Empty,
    #[error("gold turn is not an annotated user turn")]
    Unannotated,
    #[error("{golds} gold labels but {preds} predictions")]
    LengthMismatch { golds: usize, preds: usize },
}

/// What the pipeline believes after a user turn.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnPrediction {
    pub intent: Option<String>,
    pub state: BTreeMap<String, String>,
    /// Slots resolved from a "don't care" on this turn.
    pub dont_care: BTreeSet<String>,
}

impl TurnPrediction {
    pub fn from_state(st: &DialogueState) -> Self {
        TurnPrediction {
            intent: st.active_intent.clone(),
            state: st.filled_values(),
            dont_care: st
                .fills
                .iter()
                .filter(|(_, f)| f.source == FillSource::DontCareDefault && f.turn_no == st.turn_no)
                .map(|(k, _)| k.clone())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkVector {
    pub intent_ok: bool,
    pub slots_ok: bool,
    pub dont_care_ok: bool,
    pub state_ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_ok: Option<bool>,
}

impl BenchmarkVector {
    pub fn components(&self) -> impl Iterator<Item = bool> {
        [self.intent_ok, self.slots_ok, self.dont_care_ok, self.state_ok]
            .into_iter()
            .chain(self.human_ok)
    }

    /// Every present component holds.
    pub fn all_ok(&self) -> bool {
        self.components().all(|c| c)
    }

    pub fn any_ok(&self) -> bool {
        self.components().any(|c| c)
    }

    pub fn with_human(mut self, human_ok: Option<bool>) -> Self {
        self.human_ok = human_ok;
        self
    }
}

pub fn benchmark_vector(gold: &Turn, pred: &TurnPrediction) -> Result<BenchmarkVector, MetricError> {
    let gold_intent = match (&gold.gold_intent, gold.is_user()) {
        (Some(i), true) => i,
        _ => return Err(MetricError::Unannotated),
    };
    let intent_ok = pred.intent.as_ref() == Some(gold_intent);
    let slots_ok = gold.gold_state.iter().all(|(k, v)| pred.state.get(k) == Some(v));
    let dont_care_ok = pred.dont_care == gold.gold_dont_care;
    Ok(BenchmarkVector {
        intent_ok,
        slots_ok,
        dont_care_ok,
        state_ok: intent_ok && slots_ok && dont_care_ok,
        human_ok: None,
    })
}

/// A reduced non-negative fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        assert!(den > 0, "zero denominator");
        let g = gcd(num, den).max(1);
        Ratio { num: num / g, den: den / g }
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl PartialOrd for Ratio {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ratio {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (u128::from(self.num) * u128::from(other.den)).cmp(&(u128::from(other.num) * u128::from(self.den)))
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// Per-turn scores share this denominator: a turn has 4 or 5 components.
const AGA_UNIT: u64 = 60;

fn nonempty(v: &[BenchmarkVector]) -> Result<u64, MetricError> {
    if v.is_empty() {
        Err(MetricError::Empty)
    } else {
        Ok(v.len() as u64)
    }
}

/// Per-turn joint goal accuracy: turns on which every present component
/// holds. Without human annotations this is the `state_ok` rate.
pub fn jga(v: &[BenchmarkVector]) -> Result<Ratio, MetricError> {
    let n = nonempty(v)?;
    Ok(Ratio::new(v.iter().filter(|b| b.all_ok()).count() as u64, n))
}

/// Dialogues all of whose turns pass [`jga`]'s test.
pub fn jga_dialogue(dialogues: &[Vec<BenchmarkVector>]) -> Result<Ratio, MetricError> {
    if dialogues.iter().all(Vec::is_empty) {
        return Err(MetricError::Empty);
    }
    let scored: Vec<_> = dialogues.iter().filter(|d| !d.is_empty()).collect();
    let ok = scored.iter().filter(|d| d.iter().all(BenchmarkVector::all_ok)).count();
    Ok(Ratio::new(ok as u64, scored.len() as u64))
}

/// Turns with at least one true component.
pub fn fga(v: &[BenchmarkVector]) -> Result<Ratio, MetricError> {
    let n = nonempty(v)?;
    Ok(Ratio::new(v.iter().filter(|b| b.any_ok()).count() as u64, n))
}

/// Mean over turns of the fraction of true components.
pub fn aga(v: &[BenchmarkVector]) -> Result<Ratio, MetricError> {
    let n = nonempty(v)?;
    let mut total = 0u64;
    for b in v {
        let present = b.components().count() as u64;
        let ok = b.components().filter(|c| *c).count() as u64;
        total += ok * (AGA_UNIT / present);
    }
    Ok(Ratio::new(total, n * AGA_UNIT))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub f1_micro: f64,
    pub f1_macro: f64,
    pub per_class: BTreeMap<String, ClassScores>,
}

fn safe_div(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Single-label multiclass report. Classes seen in neither list are left
/// out; the macro average runs over the rest in sorted order. Micro-F1
/// equals accuracy for single-label data.
pub fn classification_report<S: AsRef<str>>(golds: &[S], preds: &[S]) -> Result<ClassificationReport, MetricError> {
    if golds.len() != preds.len() {
        return Err(MetricError::LengthMismatch {
            golds: golds.len(),
            preds: preds.len(),
        });
    }
    if golds.is_empty() {
        return Err(MetricError::Empty);
    }
    // (tp, fp, fn, support)
    let mut counts: BTreeMap<&str, [u64; 4]> = BTreeMap::new();
    let mut correct = 0u64;
    for (g, p) in golds.iter().zip(preds) {
        let (g, p) = (g.as_ref(), p.as_ref());
        counts.entry(g).or_default()[3] += 1;
        if g == p {
            correct += 1;
            counts.get_mut(g).unwrap()[0] += 1;
        } else {
            counts.entry(p).or_default()[1] += 1;
            counts.get_mut(g).unwrap()[2] += 1;
        }
    }
    let mut per_class = BTreeMap::new();
    let mut f1_sum = 0.0;
    for (class, [tp, fp, fn_, support]) in &counts {
        let precision = safe_div(*tp, tp + fp);
        let recall = safe_div(*tp, tp + fn_);
        let f1 = safe_div(2 * tp, 2 * tp + fp + fn_);
        f1_sum += f1;
        per_class.insert(
            class.to_string(),
            ClassScores {
                precision,
                recall,
                f1,
                support: *support,
            },
        );
    }
    let accuracy = correct as f64 / golds.len() as f64;
    Ok(ClassificationReport {
        accuracy,
        f1_micro: accuracy,
        f1_macro: f1_sum / counts.len() as f64,
        per_class,
    })
}
