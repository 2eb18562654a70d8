//! K-fold evaluation of a full pipeline against an annotated corpus.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::IteratorRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{split_kfold, Corpus, CorpusError, Dialogue, Turn};
use crate::engine::{Conversation, Engine, EngineError, TrackerMode, TurnOutcome};
use crate::metrics::{aga, benchmark_vector, classification_report, fga, jga, jga_dialogue, BenchmarkVector, MetricError, Ratio, TurnPrediction};
use crate::nlu::{GoldEcho, NluBackend};
use crate::ontology::Ontology;
use crate::tracker::DialogueState;
use crate::validator::Validator;

/// Appended to a slot value to corrupt it.
pub const CORRUPTION_MARK: &str = "#noise";

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("dialogue {dialogue}, turn {turn}: {source}")]
    Turn {
        dialogue: String,
        turn: usize,
        #[source]
        source: EngineError,
    },
    #[error("noise probability {0} is outside [0, 1]")]
    BadNoise(f64),
    #[error("cannot write report: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone)]
pub enum NluMode {
    /// Echo each dialogue's own gold annotations.
    GoldEcho,
    Shared(Arc<dyn NluBackend>),
}

/// Per-turn corruption of the prediction: with probability `p` one gold
/// slot's predicted value is replaced by a wrong one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Noise {
    pub p: f64,
    pub seed: u64,
}

/// Externally supplied human judgements, by dialogue id and user-turn index.
pub type HumanAnnotations = BTreeMap<String, BTreeMap<usize, bool>>;

#[derive(Clone)]
pub struct EvalConfig {
    pub nlu: NluMode,
    pub validator: Validator,
    pub tracker: TrackerMode,
    pub noise: Option<Noise>,
    pub human: Option<HumanAnnotations>,
    pub session_seed: u64,
}

impl EvalConfig {
    /// Gold-echo NLU, rule validator, rule tracker.
    pub fn oracle() -> Self {
        EvalConfig {
            nlu: NluMode::GoldEcho,
            validator: Validator::default(),
            tracker: TrackerMode::Rule,
            noise: None,
            human: None,
            session_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub dialogues: usize,
    pub turns: usize,
    pub jga: f64,
    pub jga_dialogue: f64,
    pub fga: f64,
    pub aga: f64,
    pub slot_accuracy: f64,
    pub intent_accuracy: f64,
    pub f1_micro: f64,
    pub f1_macro: f64,
}

/// Means over folds, plus each fold's values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub k: usize,
    pub seed: u64,
    pub turns: usize,
    pub jga: f64,
    pub jga_dialogue: f64,
    pub fga: f64,
    pub aga: f64,
    pub slot_accuracy: f64,
    pub intent_accuracy: f64,
    pub f1_micro: f64,
    pub f1_macro: f64,
    pub per_fold: Vec<FoldMetrics>,
}

/// Everything one dialogue produced.
#[derive(Debug, Clone)]
pub struct DialogueRun {
    pub outcomes: Vec<TurnOutcome>,
    pub predictions: Vec<TurnPrediction>,
    pub conversation: Conversation,
}

/// Feeds the user turns of `dialogue` through `engine`.
pub fn run_dialogue(
    engine: &Engine,
    dialogue: &Dialogue,
    nlu: &dyn NluBackend,
    session_seed: u64,
) -> Result<DialogueRun, EvalError> {
    let mut conv = Conversation::new(DialogueState::new(dialogue.id.clone(), session_seed));
    let mut run = DialogueRun {
        outcomes: Vec::new(),
        predictions: Vec::new(),
        conversation: conv.clone(),
    };
    for (idx, turn) in dialogue.turns.iter().enumerate().filter(|(_, t)| t.is_user()) {
        let out = engine.step_with(&mut conv, &turn.text, nlu).map_err(|source| EvalError::Turn {
            dialogue: dialogue.id.clone(),
            turn: idx,
            source,
        })?;
        run.predictions.push(TurnPrediction::from_state(&conv.state));
        run.outcomes.push(out);
    }
    run.conversation = conv;
    Ok(run)
}

fn corrupt(rng: &mut ChaCha8Rng, gold: &Turn, pred: &mut TurnPrediction) {
    if let Some((k, v)) = gold.gold_state.iter().choose(rng) {
        pred.state.insert(k.clone(), format!("{v}{CORRUPTION_MARK}"));
    }
}

struct Scored {
    vectors: Vec<Vec<BenchmarkVector>>,
    gold_intents: Vec<String>,
    pred_intents: Vec<String>,
    slots_right: u64,
    slots_total: u64,
}

fn score_fold(
    engine: &Engine,
    test: &Corpus,
    config: &EvalConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Scored, EvalError> {
    let mut s = Scored {
        vectors: Vec::new(),
        gold_intents: Vec::new(),
        pred_intents: Vec::new(),
        slots_right: 0,
        slots_total: 0,
    };
    for d in &test.dialogues {
        let run = match &config.nlu {
            NluMode::GoldEcho => run_dialogue(engine, d, &GoldEcho::new(&d.turns), config.session_seed)?,
            NluMode::Shared(b) => run_dialogue(engine, d, b.as_ref(), config.session_seed)?,
        };
        let human = config.human.as_ref().and_then(|h| h.get(&d.id));
        let mut dv = Vec::new();
        for (i, (gold, mut pred)) in d.user_turns().zip(run.predictions).enumerate() {
            if let Some(n) = config.noise {
                if rng.gen::<f64>() < n.p {
                    corrupt(rng, gold, &mut pred);
                }
            }
            let v = benchmark_vector(gold, &pred)?.with_human(human.and_then(|h| h.get(&i).copied()));
            dv.push(v);
            s.gold_intents.push(gold.gold_intent.clone().unwrap_or_default());
            s.pred_intents.push(pred.intent.clone().unwrap_or_else(|| "none".into()));
            for (k, gv) in &gold.gold_state {
                s.slots_total += 1;
                s.slots_right += u64::from(pred.state.get(k) == Some(gv));
            }
        }
        s.vectors.push(dv);
    }
    Ok(s)
}

pub fn evaluate_pipeline(
    corpus: &Corpus,
    ontology: &Ontology,
    config: &EvalConfig,
    k: usize,
    seed: u64,
) -> Result<MetricReport, EvalError> {
    corpus.validate(ontology)?;
    if let Some(n) = config.noise {
        if !(0.0..=1.0).contains(&n.p) {
            return Err(EvalError::BadNoise(n.p));
        }
    }
    let folds = split_kfold(corpus, k, seed)?;
    let shared = match &config.nlu {
        NluMode::Shared(b) => b.clone(),
        NluMode::GoldEcho => Arc::new(GoldEcho::new(std::iter::empty())) as Arc<dyn NluBackend>,
    };
    let engine = Engine::rule(Arc::new(ontology.clone()), shared, config.validator.clone())
        .with_tracker(config.tracker.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(config.noise.map_or(0, |n| n.seed));

    let mut per_fold = Vec::with_capacity(folds.len());
    for fold in &folds {
        let s = score_fold(&engine, &fold.test, config, &mut rng)?;
        let flat: Vec<BenchmarkVector> = s.vectors.iter().flatten().copied().collect();
        let cls = classification_report(&s.gold_intents, &s.pred_intents)?;
        per_fold.push(FoldMetrics {
            fold: fold.index,
            dialogues: fold.test.dialogues.len(),
            turns: flat.len(),
            jga: jga(&flat)?.value(),
            jga_dialogue: jga_dialogue(&s.vectors)?.value(),
            fga: fga(&flat)?.value(),
            aga: aga(&flat)?.value(),
            slot_accuracy: if s.slots_total == 0 {
                1.0
            } else {
                Ratio::new(s.slots_right, s.slots_total).value()
            },
            intent_accuracy: cls.accuracy,
            f1_micro: cls.f1_micro,
            f1_macro: cls.f1_macro,
        });
    }
    let mean = |f: fn(&FoldMetrics) -> f64| per_fold.iter().map(f).sum::<f64>() / per_fold.len() as f64;
    Ok(MetricReport {
        k,
        seed,
        turns: per_fold.iter().map(|f| f.turns).sum(),
        jga: mean(|f| f.jga),
        jga_dialogue: mean(|f| f.jga_dialogue),
        fga: mean(|f| f.fga),
        aga: mean(|f| f.aga),
        slot_accuracy: mean(|f| f.slot_accuracy),
        intent_accuracy: mean(|f| f.intent_accuracy),
        f1_micro: mean(|f| f.f1_micro),
        f1_macro: mean(|f| f.f1_macro),
        per_fold,
    })
}

const COLUMNS: [&str; 11] = [
    "fold", "turns", "JGA", "JGA-dlg", "FGA", "AGA", "slot-acc", "intent-acc", "F1-micro", "F1-macro", "dialogues",
];

impl MetricReport {
    pub fn summary_line(&self) -> String {
        format!("JGA={:.3} FGA={:.3} AGA={:.3}", self.jga, self.fga, self.aga)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned-column table: one row per fold, then the mean.
    pub fn to_text(&self) -> String {
        let row = |label: String, turns: usize, dialogues: String, v: [f64; 8]| {
            let mut cells = vec![label, turns.to_string()];
            cells.extend(v.iter().map(|x| format!("{x:.4}")));
            cells.push(dialogues);
            cells
        };
        let mut rows = vec![COLUMNS.iter().map(|c| c.to_string()).collect::<Vec<_>>()];
        for f in &self.per_fold {
            rows.push(row(
                f.fold.to_string(),
                f.turns,
                f.dialogues.to_string(),
                [f.jga, f.jga_dialogue, f.fga, f.aga, f.slot_accuracy, f.intent_accuracy, f.f1_micro, f.f1_macro],
            ));
        }
        rows.push(row(
            "mean".into(),
            self.turns,
            self.per_fold.iter().map(|f| f.dialogues).sum::<usize>().to_string(),
            [
                self.jga,
                self.jga_dialogue,
                self.fga,
                self.aga,
                self.slot_accuracy,
                self.intent_accuracy,
                self.f1_micro,
                self.f1_macro,
            ],
        ));
        let widths: Vec<usize> = (0..COLUMNS.len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in rows {
            let line: Vec<String> = r.iter().zip(&widths).map(|(cell, w)| format!("{cell:>w$}")).collect();
            let _ = writeln!(out, "{}", line.join("  "));
        }
        out
    }

    /// Writes `<path>.json` and `<path>.txt`.
    pub fn write(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path.with_extension("json"), self.to_json())?;
        std::fs::write(path.with_extension("txt"), self.to_text())?;
        Ok(())
    }
}
