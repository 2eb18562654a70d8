//! Three-way intent validation of NLU output: confirmed, ambiguous or
//! unclear. Two modes share one feature extractor: a threshold rule and a
//! gradient-boosted tree ensemble.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::nlu::{rank, NluOutput};

mod gbt;
pub mod synth;
mod tune;

pub use gbt::{train_gbt, ClassWeights, Dataset, GbtModel, GbtParams, Node, TrainReport};
pub use tune::{tune_offsets, tune_thresholds, GRID_STEP};

/// Smoothing factor of the running top score.
pub const ALPHA: f64 = 0.7;
pub const N_BASE: usize = 6;
/// 6 base features plus their 21 degree-2 products.
pub const N_FEATURES: usize = N_BASE + N_BASE * (N_BASE + 1) / 2;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ValidatorError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite feature {feature} in sample {sample}")]
    NonFinite { sample: usize, feature: usize },
    #[error("feature vector has length {found}, model expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("malformed model: {0}")]
    MalformedModel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Confirmed,
    Ambiguous,
    Unclear,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Confirmed, Label::Ambiguous, Label::Unclear];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Confirmed => "confirmed",
            Label::Ambiguous => "ambiguous",
            Label::Unclear => "unclear",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidatorFeatures {
    pub top1: f64,
    pub top2: f64,
    pub top3: f64,
    pub margin: f64,
    pub entropy: f64,
    pub smoothed_max: f64,
    pub normalized_top1: f64,
}

impl ValidatorFeatures {
    pub fn base(&self) -> [f64; N_BASE] {
        [
            self.top1,
            self.top2,
            self.margin,
            self.entropy,
            self.smoothed_max,
            self.normalized_top1,
        ]
    }

    /// Base features followed by the products `b[i]*b[j]` for `i <= j`.
    pub fn vector(&self) -> Vec<f64> {
        let b = self.base();
        let mut v = Vec::with_capacity(N_FEATURES);
        v.extend_from_slice(&b);
        for i in 0..N_BASE {
            for j in i..N_BASE {
                v.push(b[i] * b[j]);
            }
        }
        v
    }
}

/// Running per-dialogue state the features depend on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureState {
    pub turns: u32,
    pub smoothed_max: f64,
    pub max_top1: f64,
}

impl FeatureState {
    /// Consumes one more turn's distribution and returns its features.
    pub fn push(&mut self, scores: &BTreeMap<String, f64>) -> ValidatorFeatures {
        let ranked = rank(scores);
        let top = |i: usize| ranked.get(i).map_or(0.0, |(_, s)| *s);
        let (top1, top2, top3) = (top(0), top(1), top(2));
        let entropy = -scores
            .values()
            .filter(|p| **p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>();
        let max_entropy = (scores.len().max(1) as f64).ln();

        self.smoothed_max = if self.turns == 0 {
            top1
        } else {
            ALPHA * top1 + (1.0 - ALPHA) * self.smoothed_max
        };
        self.max_top1 = self.max_top1.max(top1);
        self.turns += 1;

        ValidatorFeatures {
            top1,
            top2,
            top3,
            margin: top1 - top2,
            entropy: entropy.clamp(0.0, max_entropy),
            smoothed_max: self.smoothed_max,
            normalized_top1: if self.max_top1 > 0.0 { top1 / self.max_top1 } else { 0.0 },
        }
    }
}

/// Features of the last output in `outputs`, the dialogue so far.
///
/// # Panics
/// If `outputs` is empty.
pub fn extract_features(outputs: &[NluOutput]) -> ValidatorFeatures {
    assert!(!outputs.is_empty(), "extract_features needs at least one turn");
    let mut st = FeatureState::default();
    let mut last = None;
    for o in outputs {
        last = Some(st.push(&o.scores));
    }
    last.expect("nonempty")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleThresholds {
    pub tau_min: f64,
    pub tau_margin: f64,
    pub tau_high: f64,
}

impl Default for RuleThresholds {
    fn default() -> Self {
        RuleThresholds {
            tau_min: 0.5,
            tau_margin: 0.2,
            tau_high: 0.35,
        }
    }
}

impl RuleThresholds {
    pub fn validate(&self) -> Result<(), ValidatorError> {
        for (name, t) in [
            ("tau_min", self.tau_min),
            ("tau_margin", self.tau_margin),
            ("tau_high", self.tau_high),
        ] {
            if !(0.0..=1.0).contains(&t) {
                return Err(ValidatorError::InvalidParams(format!("{name}={t} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

pub fn classify_rule(f: &ValidatorFeatures, t: &RuleThresholds) -> Label {
    if f.top1 < t.tau_min {
        Label::Unclear
    } else if f.top2 >= t.tau_high {
        Label::Ambiguous
    } else if f.margin >= t.tau_margin {
        Label::Confirmed
    } else {
        Label::Ambiguous
    }
}

pub fn one_hot(label: Label) -> [f64; 3] {
    let mut p = [0.0; 3];
    p[label.index()] = 1.0;
    p
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax3(v: &[f64; 3]) -> usize {
    let mut best = 0;
    for k in 1..3 {
        if v[k] > v[best] {
            best = k;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationVerdict {
    pub label: Label,
    /// Indexed by [`Label::index`].
    pub probabilities: [f64; 3],
    /// Argmax intent of the context run.
    pub chosen_intent: String,
    pub features: ValidatorFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Validator {
    Rule(RuleThresholds),
    Gbt(GbtModel),
}

impl Default for Validator {
    fn default() -> Self {
        Validator::Rule(RuleThresholds::default())
    }
}

impl Validator {
    pub fn classify(&self, f: &ValidatorFeatures) -> Result<(Label, [f64; 3]), ValidatorError> {
        match self {
            Validator::Rule(t) => {
                let l = classify_rule(f, t);
                Ok((l, one_hot(l)))
            }
            Validator::Gbt(m) => m.classify(&f.vector()),
        }
    }

    pub fn verdict(&self, f: ValidatorFeatures, nlu: &NluOutput) -> Result<ValidationVerdict, ValidatorError> {
        let (label, probabilities) = self.classify(&f)?;
        Ok(ValidationVerdict {
            label,
            probabilities,
            chosen_intent: nlu.context_intent.clone(),
            features: f,
        })
    }
}
