//! Checks shared by the integration tests and the acceptance runner. Each
//! returns a one-line summary, or the first counterexample it found.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use dst_core::corpus::{load_corpus, Corpus, Dialogue, Turn};
use dst_core::engine::{Conversation, Engine, TrackerMode, TurnOutcome};
use dst_core::eval::{evaluate_pipeline, run_dialogue, EvalConfig, Noise};
use dst_core::generate::generate_corpus;
use dst_core::llm::{CannedBackend, CompletionBackend, CompletionRequest, LlmError, RuleEchoBackend};
use dst_core::metrics::{
    aga, benchmark_vector, classification_report, fga, jga, jga_dialogue, BenchmarkVector, Ratio, TurnPrediction,
};
use dst_core::nlu::{GoldEcho, NluBackend, NluOutput};
use dst_core::querygen::build_query;
use dst_core::tracker::{emit_result, update, ActionKind, DialogueState, FillSource, Pending, TrackerAction};
use dst_core::validator::synth::{imbalanced, IMBALANCED_PRIOR};
use dst_core::validator::{
    one_hot, train_gbt, tune_thresholds, ClassWeights, Dataset, FeatureState, GbtParams, Label, ValidationVerdict,
    Validator,
};
use dst_core::demo;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

pub const CORPUS_50: &str = include_str!("../../../../fixtures/corpus_50.json");
pub const VALID_SMALL: &str = include_str!("../../../../fixtures/valid_small.json");

pub fn corpus_50() -> Corpus {
    load_corpus(CORPUS_50, demo::ontology()).expect("bundled corpus loads")
}

/// Every bundled annotated dialogue.
pub fn fixture_dialogues() -> Vec<Dialogue> {
    let mut all = corpus_50().dialogues;
    all.extend(load_corpus(VALID_SMALL, demo::ontology()).expect("small corpus loads").dialogues);
    all
}

fn within(started: Instant, budget: Duration, what: String) -> Check {
    let took = started.elapsed();
    if took > budget {
        Err(format!("{what}, but took {took:.1?} (budget {budget:?})"))
    } else {
        Ok(format!("{what} in {took:.2?}"))
    }
}

// ---------------------------------------------------------------- metrics

/// Exact non-negative fraction, kept reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Frac {
    pub num: u128,
    pub den: u128,
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Frac {
    pub fn new(num: u128, den: u128) -> Frac {
        assert!(den > 0);
        let g = gcd(num, den).max(1);
        Frac { num: num / g, den: den / g }
    }

    pub fn zero() -> Frac {
        Frac { num: 0, den: 1 }
    }

    pub fn add(self, o: Frac) -> Frac {
        Frac::new(self.num * o.den + o.num * self.den, self.den * o.den)
    }

    pub fn div_int(self, k: u128) -> Frac {
        Frac::new(self.num, self.den * k)
    }

    /// Only exact when both parts fit in 53 bits, which holds for every
    /// value compared here.
    pub fn to_f64(self) -> f64 {
        assert!(self.num < 1 << 53 && self.den < 1 << 53);
        self.num as f64 / self.den as f64
    }

    pub fn same_as(self, r: Ratio) -> bool {
        self.num == u128::from(r.num) && self.den == u128::from(r.den)
    }
}

/// The benchmark vector recomputed from its definition.
fn oracle_vector(gold: &Turn, pred: &TurnPrediction, human: Option<bool>) -> Vec<bool> {
    let gi = gold.gold_intent.as_deref().unwrap();
    let intent_ok = matches!(&pred.intent, Some(p) if p == gi);
    let mut slots_ok = true;
    for (k, v) in &gold.gold_state {
        let mut found = false;
        for (pk, pv) in &pred.state {
            if pk == k && pv == v {
                found = true;
            }
        }
        slots_ok &= found;
    }
    let dc_ok = gold.gold_dont_care.len() == pred.dont_care.len()
        && gold.gold_dont_care.iter().all(|s| pred.dont_care.contains(s));
    let mut c = vec![intent_ok, slots_ok, dc_ok, intent_ok && slots_ok && dc_ok];
    c.extend(human);
    c
}

const INTENTS: [&str; 6] = ["alpha", "beta", "gamma", "delta", "eps", "zeta"];
const SLOTS: [&str; 5] = ["s0", "s1", "s2", "s3", "s4"];
const VALUES: [&str; 4] = ["v0", "v1", "v2", "v3"];

fn random_turn(rng: &mut ChaCha8Rng) -> (Turn, TurnPrediction) {
    let mut gold = Turn::user("t", *INTENTS.choose(rng).unwrap());
    for s in SLOTS {
        if rng.gen_bool(0.4) {
            gold.gold_state.insert(s.into(), VALUES.choose(rng).unwrap().to_string());
        }
    }
    for s in gold.gold_state.keys() {
        if rng.gen_bool(0.1) {
            gold.gold_dont_care.insert(s.clone());
        }
    }
    let mut pred = TurnPrediction {
        intent: gold.gold_intent.clone(),
        state: gold.gold_state.clone(),
        dont_care: gold.gold_dont_care.clone(),
    };
    if rng.gen_bool(0.5) {
        if rng.gen_bool(0.2) {
            pred.intent = Some(INTENTS.choose(rng).unwrap().to_string());
        }
        if rng.gen_bool(0.05) {
            pred.intent = None;
        }
        for s in SLOTS {
            match rng.gen_range(0..10) {
                0 => {
                    pred.state.remove(s);
                }
                1 => {
                    pred.state.insert(s.into(), VALUES.choose(rng).unwrap().to_string());
                }
                _ => {}
            }
            if rng.gen_bool(0.05)
                && !pred.dont_care.remove(s) {
                    pred.dont_care.insert(s.into());
                }
        }
    }
    (gold, pred)
}

/// Compares every metric on one random corpus against the oracle.
fn metric_case(rng: &mut ChaCha8Rng) -> Result<usize, String> {
    let n = rng.gen_range(1..=200);
    let annotated = rng.gen_bool(0.3);
    let mut dialogues: Vec<Vec<BenchmarkVector>> = vec![Vec::new()];
    let mut oracle_dialogues: Vec<Vec<Vec<bool>>> = vec![Vec::new()];
    let (mut golds, mut preds) = (Vec::new(), Vec::new());
    for _ in 0..n {
        let (gold, pred) = random_turn(rng);
        let human = (annotated && rng.gen_bool(0.5)).then(|| rng.gen_bool(0.8));
        let v = benchmark_vector(&gold, &pred).map_err(|e| e.to_string())?.with_human(human);
        let o = oracle_vector(&gold, &pred, human);
        let lib: Vec<bool> = v.components().collect();
        if lib != o {
            return Err(format!("vector {lib:?} but oracle says {o:?}"));
        }
        if !dialogues.last().unwrap().is_empty() && rng.gen_bool(0.25) {
            dialogues.push(Vec::new());
            oracle_dialogues.push(Vec::new());
        }
        dialogues.last_mut().unwrap().push(v);
        oracle_dialogues.last_mut().unwrap().push(o);
        golds.push(gold.gold_intent.clone().unwrap());
        preds.push(pred.intent.clone().unwrap_or_else(|| "none".into()));
    }
    let flat: Vec<BenchmarkVector> = dialogues.iter().flatten().copied().collect();
    let oflat: Vec<&Vec<bool>> = oracle_dialogues.iter().flatten().collect();
    let nn = n as u128;

    let o_jga = Frac::new(oflat.iter().filter(|c| c.iter().all(|b| *b)).count() as u128, nn);
    let o_fga = Frac::new(oflat.iter().filter(|c| c.iter().any(|b| *b)).count() as u128, nn);
    let o_aga = oflat
        .iter()
        .map(|c| Frac::new(c.iter().filter(|b| **b).count() as u128, c.len() as u128))
        .fold(Frac::zero(), Frac::add)
        .div_int(nn);
    let o_jgad = Frac::new(
        oracle_dialogues.iter().filter(|d| d.iter().all(|c| c.iter().all(|b| *b))).count() as u128,
        oracle_dialogues.len() as u128,
    );
    let m = |r: Result<Ratio, _>| r.map_err(|e: dst_core::metrics::MetricError| e.to_string());
    for (name, lib, want) in [
        ("jga", m(jga(&flat))?, o_jga),
        ("fga", m(fga(&flat))?, o_fga),
        ("aga", m(aga(&flat))?, o_aga),
        ("jga_dialogue", m(jga_dialogue(&dialogues))?, o_jgad),
    ] {
        if !want.same_as(lib) {
            return Err(format!("{name} = {lib} on {n} turns, oracle {}/{}", want.num, want.den));
        }
        if lib.value().to_bits() != want.to_f64().to_bits() {
            return Err(format!("{name} value differs from the exact fraction"));
        }
    }

    let report = classification_report(&golds, &preds).map_err(|e| e.to_string())?;
    let correct = golds.iter().zip(&preds).filter(|(g, p)| g == p).count() as u128;
    let acc = Frac::new(correct, nn).to_f64();
    if report.accuracy.to_bits() != acc.to_bits() || report.f1_micro.to_bits() != acc.to_bits() {
        return Err(format!("accuracy {} / micro {} vs oracle {acc}", report.accuracy, report.f1_micro));
    }
    let classes: BTreeSet<&String> = golds.iter().chain(&preds).collect();
    if classes.len() != report.per_class.len() {
        return Err(format!("{} classes reported, {} present", report.per_class.len(), classes.len()));
    }
    let ratio = |a: usize, b: usize| if b == 0 { Frac::zero() } else { Frac::new(a as u128, b as u128) };
    let mut exact_macro = Frac::zero();
    let mut float_macro = 0.0;
    for c in &classes {
        let tp = golds.iter().zip(&preds).filter(|(g, p)| g == c && p == c).count();
        let fp = golds.iter().zip(&preds).filter(|(g, p)| g != c && p == c).count();
        let fn_ = golds.iter().zip(&preds).filter(|(g, p)| g == c && p != c).count();
        let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
        let got = report.per_class[c.as_str()];
        for (name, lib, want) in [
            ("precision", got.precision, ratio(tp, tp + fp)),
            ("recall", got.recall, ratio(tp, tp + fn_)),
            ("f1", got.f1, f1),
        ] {
            if lib.to_bits() != want.to_f64().to_bits() {
                return Err(format!("{name} of {c}: {lib} vs oracle {}/{}", want.num, want.den));
            }
        }
        if got.support != (tp + fn_) as u64 {
            return Err(format!("support of {c}"));
        }
        exact_macro = exact_macro.add(f1);
        float_macro += f1.to_f64();
    }
    // the macro mean is a float sum over classes in sorted order; check the
    // summation bit for bit and its distance from the exact mean
    let k = classes.len() as u128;
    float_macro /= k as f64;
    let exact_macro = exact_macro.div_int(k);
    if report.f1_macro.to_bits() != float_macro.to_bits() {
        return Err(format!("macro f1 {} vs {float_macro}", report.f1_macro));
    }
    if (report.f1_macro - exact_macro.num as f64 / exact_macro.den as f64).abs() > 1e-15 {
        return Err(format!("macro f1 {} far from exact {}/{}", report.f1_macro, exact_macro.num, exact_macro.den));
    }
    Ok(n)
}

/// Criterion 1.
pub fn metric_oracle(corpora: usize, seed: u64) -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut turns = 0;
    for i in 0..corpora {
        turns += metric_case(&mut rng).map_err(|e| format!("corpus {i}: {e}"))?;
    }
    within(
        t,
        Duration::from_secs(30),
        format!("{corpora} corpora, {turns} turns, all metrics equal the oracle"),
    )
}

/// Criterion 2.
pub fn ordering_law(samples: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut first = None;
    for _ in 0..samples {
        let n = rng.gen_range(1..=50);
        let v: Vec<BenchmarkVector> = (0..n)
            .map(|_| BenchmarkVector {
                intent_ok: rng.gen(),
                slots_ok: rng.gen(),
                dont_care_ok: rng.gen(),
                state_ok: rng.gen(),
                human_ok: if rng.gen_bool(0.3) { Some(rng.gen()) } else { None },
            })
            .collect();
        let (j, a, f) = (jga(&v).unwrap(), aga(&v).unwrap(), fga(&v).unwrap());
        if !(j <= a && a <= f) {
            violations += 1;
            first.get_or_insert(format!("jga {j}, aga {a}, fga {f} on {v:?}"));
        }
    }
    match first {
        None => Ok(format!("{samples} random vector sets, 0 violations")),
        Some(e) => Err(format!("{violations} violations; first: {e}")),
    }
}

// ---------------------------------------------------------------- pipeline

/// Criterion 3.
pub fn oracle_pipeline() -> Check {
    let t = Instant::now();
    let c = corpus_50();
    let r = evaluate_pipeline(&c, demo::ontology(), &EvalConfig::oracle(), 5, 0).map_err(|e| e.to_string())?;
    if r.jga != 1.0 || r.fga != 1.0 || r.aga != 1.0 {
        return Err(format!("JGA={} FGA={} AGA={}", r.jga, r.fga, r.aga));
    }
    within(t, Duration::from_secs(10), format!("JGA=FGA=AGA=1.000 over {} turns", r.turns))
}

/// Criterion 4.
pub fn noise_calibration(dialogues: usize, seed: u64) -> Check {
    let t = Instant::now();
    let c = generate_corpus(demo::ontology(), demo::lexicon().rules(), dialogues, seed);
    let turns = c.user_turn_count();
    if turns < 1000 {
        return Err(format!("only {turns} turns generated"));
    }
    let cfg = EvalConfig {
        noise: Some(Noise { p: 0.30, seed }),
        ..EvalConfig::oracle()
    };
    let r = evaluate_pipeline(&c, demo::ontology(), &cfg, 5, seed).map_err(|e| e.to_string())?;
    if !(0.67..=0.73).contains(&r.jga) {
        return Err(format!("JGA {:.4} over {turns} turns is outside [0.67, 0.73]", r.jga));
    }
    within(t, Duration::from_secs(60), format!("JGA {:.4} over {turns} turns at p=0.30", r.jga))
}

// ---------------------------------------------------------------- validator

fn per_class(model: &dst_core::validator::GbtModel, d: &Dataset) -> ([f64; 3], [f64; 3]) {
    let mut tp = [0usize; 3];
    let mut predicted = [0usize; 3];
    let mut actual = [0usize; 3];
    for (x, y) in d.x.iter().zip(&d.y) {
        let p = model.classify(x).unwrap().0;
        predicted[p.index()] += 1;
        actual[y.index()] += 1;
        if p == *y {
            tp[y.index()] += 1;
        }
    }
    let recall = std::array::from_fn(|k| tp[k] as f64 / actual[k].max(1) as f64);
    let f1 = std::array::from_fn(|k| 2.0 * tp[k] as f64 / (actual[k] + predicted[k]).max(1) as f64);
    (recall, f1)
}

/// Criterion 5. Both models train on the same rows; the weighted one tunes
/// its offsets on a held-out fifth, and both are scored on a fresh sample.
pub fn imbalance(seed: u64) -> Check {
    let t = Instant::now();
    let all = imbalanced(10_000, seed, IMBALANCED_PRIOR);
    let (mut train, mut dev) = (Vec::new(), Vec::new());
    for (i, s) in all.into_iter().enumerate() {
        if i % 5 == 4 { dev.push(s) } else { train.push(s) }
    }
    let train = Dataset::from_features(train);
    let dev = Dataset::from_features(dev);
    let test = Dataset::from_features(imbalanced(10_000, seed + 1, IMBALANCED_PRIOR));

    let plain = GbtParams {
        class_weights: ClassWeights::Uniform,
        seed,
        ..GbtParams::default()
    };
    let (base, _) = train_gbt(&train, &plain).map_err(|e| e.to_string())?;
    let weighted = GbtParams {
        class_weights: ClassWeights::Balanced,
        ..plain.clone()
    };
    let (mut tuned, _) = train_gbt(&train, &weighted).map_err(|e| e.to_string())?;
    tuned.thresholds = tune_thresholds(&tuned, &dev).map_err(|e| e.to_string())?.to_vec();

    let (rb, _) = per_class(&base, &test);
    let (rt, ft) = per_class(&tuned, &test);
    let summary = format!(
        "recall ambiguous {:.3} -> {:.3}, unclear {:.3} -> {:.3}, confirmed F1 {:.3}",
        rb[1], rt[1], rb[2], rt[2], ft[0]
    );
    if !(rt[1] > rb[1] && rt[2] > rb[2] && ft[0] >= 0.90) {
        return Err(summary);
    }
    within(t, Duration::from_secs(120), summary)
}

fn random_dataset(rng: &mut ChaCha8Rng) -> Dataset {
    let n = rng.gen_range(20..300);
    let d = rng.gen_range(1..8);
    let discrete = rng.gen_bool(0.3);
    let noise = rng.gen_range(0.0..0.5);
    let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut data = Dataset::default();
    for _ in 0..n {
        let x: Vec<f64> = (0..d)
            .map(|_| if discrete { rng.gen_range(0..4) as f64 } else { rng.gen_range(-2.0..2.0) })
            .collect();
        let s: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
        let y = if rng.gen_bool(noise) {
            Label::from_index(rng.gen_range(0..3)).unwrap()
        } else if s > 0.3 {
            Label::Confirmed
        } else if s > -0.3 {
            Label::Ambiguous
        } else {
            Label::Unclear
        };
        data.x.push(x);
        data.y.push(y);
    }
    data
}

fn random_params(rng: &mut ChaCha8Rng) -> GbtParams {
    GbtParams {
        n_trees: rng.gen_range(1..40),
        max_depth: rng.gen_range(1..5),
        learning_rate: rng.gen_range(0.05..1.0),
        class_weights: match rng.gen_range(0..3) {
            0 => ClassWeights::Uniform,
            1 => ClassWeights::Balanced,
            _ => ClassWeights::Explicit([rng.gen_range(0.2..5.0), rng.gen_range(0.2..5.0), rng.gen_range(0.2..5.0)]),
        },
        seed: rng.gen(),
        subsample: if rng.gen_bool(0.5) { 1.0 } else { rng.gen_range(0.5..1.0) },
        lambda: rng.gen_range(0.0..2.0),
        min_child_weight: rng.gen_range(0.0..3.0),
    }
}

/// Two classes split by the line a + b = 1, with a margin around it.
pub fn separable_toy(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = Dataset::default();
    while d.len() < n {
        let (a, b): (f64, f64) = (rng.gen(), rng.gen());
        if (a + b - 1.0).abs() < 0.05 {
            continue;
        }
        d.x.push(vec![a, b]);
        d.y.push(if a + b > 1.0 { Label::Confirmed } else { Label::Ambiguous });
    }
    d
}

/// Criterion 6.
pub fn gbt_correctness(datasets: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rounds = 0;
    for i in 0..datasets {
        let d = random_dataset(&mut rng);
        let p = random_params(&mut rng);
        let (_, rep) = train_gbt(&d, &p).map_err(|e| format!("dataset {i}: {e}"))?;
        if let Some(r) = rep.loss_history.windows(2).position(|w| w[1] > w[0] + 1e-9) {
            return Err(format!(
                "dataset {i}: loss rose in round {} ({} -> {}) with {p:?}",
                r + 1,
                rep.loss_history[r],
                rep.loss_history[r + 1]
            ));
        }
        rounds += rep.loss_history.len() - 1;
    }

    let toy = separable_toy(200, 3);
    let params = GbtParams {
        n_trees: 50,
        max_depth: 3,
        learning_rate: 0.5,
        ..GbtParams::default()
    };
    let (model, _) = train_gbt(&toy, &params).map_err(|e| e.to_string())?;
    let fits = |m: &dst_core::validator::GbtModel| toy.x.iter().zip(&toy.y).all(|(x, y)| m.classify(x).unwrap().0 == *y);
    let first = (1..=model.trees.len()).find(|&r| {
        let mut m = model.clone();
        m.trees.truncate(r);
        fits(&m)
    });
    match first {
        Some(r) if fits(&model) => Ok(format!(
            "{datasets} datasets, {rounds} rounds, loss never rose; toy fit exactly after {r} of 50 rounds"
        )),
        _ => Err("separable toy not fit within 50 rounds".into()),
    }
}

// ---------------------------------------------------------------- tracker

fn feats() -> dst_core::validator::ValidatorFeatures {
    FeatureState::default().push(&BTreeMap::from([("x".to_string(), 1.0)]))
}

pub fn nlu(local: &str, context: &str, slots: &[(&str, &str)]) -> NluOutput {
    let mut o = NluOutput::one_hot(demo::ontology(), context);
    o.turn_local_intent = local.into();
    o.slots = slots.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    o
}

pub fn verdict(label: Label, n: &NluOutput) -> ValidationVerdict {
    ValidationVerdict {
        label,
        probabilities: one_hot(label),
        chosen_intent: n.context_intent.clone(),
        features: feats(),
    }
}

pub fn step(st: &DialogueState, n: &NluOutput, l: Label) -> Result<(DialogueState, TrackerAction), String> {
    update(st, n, &verdict(l, n), demo::ontology()).map_err(|e| e.to_string())
}

fn expect(ok: bool, what: &str) -> Result<(), String> {
    if ok { Ok(()) } else { Err(what.to_string()) }
}

/// The five worked examples of the update rule, on the bundled ontology.
pub fn worked_examples() -> Result<(), String> {
    let fresh = DialogueState::new("s", 7);
    let city = [("city", "Tehran")];

    let (_, a) = step(&fresh, &nlu("get_weather", "get_weather", &city), Label::Confirmed)?;
    let r = a.result.as_ref().ok_or("completion: no result")?;
    expect(
        a.kind == ActionKind::Complete && r.state == BTreeMap::from([("city".into(), "Tehran".into())]),
        "completion: get_weather with a city should complete",
    )?;

    let (st, a) = step(&fresh, &nlu("find_restaurant", "find_restaurant", &city), Label::Confirmed)?;
    let bank = demo::ontology().questions("find_restaurant", "cuisine").ok_or("no cuisine bank")?;
    expect(
        a.kind == ActionKind::AskFollowup && a.question.as_ref().is_some_and(|q| bank.contains(q)),
        "follow-up: question should come from the cuisine bank",
    )?;

    let (st2, a) = step(&st, &nlu("get_weather", "get_weather", &[("city", "Shiraz")]), Label::Unclear)?;
    expect(
        a.kind == ActionKind::AskClarifyUnclear
            && st2.fills == st.fills
            && st2.pending == Pending::AwaitingClarificationUnclear,
        "unclear pause: fills must stay unchanged",
    )?;

    let full = nlu("find_restaurant", "find_restaurant", &[("city", "Tehran"), ("cuisine", "kebab")]);
    let (st, _) = step(&fresh, &full, Label::Confirmed)?;
    let (st, a) = step(&st, &nlu("get_weather", "get_weather", &[]), Label::Confirmed)?;
    expect(
        st.active_intent.as_deref() == Some("get_weather")
            && st.fills.len() == 1
            && st.fills.get("city").is_some_and(|f| f.value == "Tehran" && f.source == FillSource::CarriedOver)
            && a.kind == ActionKind::Complete,
        "shift: city carried over, cuisine dropped, complete",
    )?;

    let (st, _) = step(&fresh, &nlu("find_restaurant", "find_restaurant", &city), Label::Confirmed)?;
    let mut dc = nlu("dont_care", "dont_care", &[]);
    dc.dont_care_slots = BTreeSet::from(["cuisine".to_string()]);
    let (st, _) = step(&st, &dc, Label::Confirmed)?;
    expect(
        st.fills
            .get("cuisine")
            .is_some_and(|f| f.value == "kebab" && f.source == FillSource::DontCareDefault),
        "don't care: cuisine takes (kebab, dont_care_default)",
    )?;
    Ok(())
}

fn lexicon_engine() -> Engine {
    Engine::rule(Arc::new(demo::ontology().clone()), Arc::new(demo::lexicon()), Validator::default())
}

fn check_replay(d: &Dialogue, engine: &Engine, nlu: &dyn NluBackend) -> Result<usize, String> {
    let mut conv = Conversation::new(DialogueState::new(d.id.clone(), 11));
    let mut scores = Vec::new();
    let mut turns = 0;
    for t in d.user_turns() {
        let out = engine.step_with(&mut conv, &t.text, nlu).map_err(|e| format!("{}: {e}", d.id))?;
        scores.push(out.nlu.scores.clone());
        let st = DialogueState::replay(d.id.clone(), 11, &conv.state.history).map_err(|e| format!("{}: {e}", d.id))?;
        if serde_json::to_vec(&st).unwrap() != serde_json::to_vec(&conv.state).unwrap() {
            return Err(format!("{}: replayed state differs after turn {turns}", d.id));
        }
        let back = Conversation::restore(&d.id, 11, &conv.state.history, conv.schedule.clone(), &scores)
            .map_err(|e| e.to_string())?;
        if back != conv {
            return Err(format!("{}: restored conversation differs after turn {turns}", d.id));
        }
        turns += 1;
    }
    Ok(turns)
}

/// Criterion 7.
pub fn tracker_suite() -> Check {
    worked_examples()?;
    let engine = lexicon_engine();
    let mut turns = 0;
    let dialogues = fixture_dialogues();
    for d in &dialogues {
        turns += check_replay(d, &engine, &GoldEcho::new(&d.turns))?;
        turns += check_replay(d, &engine, demo::lexicon())?;
    }
    Ok(format!(
        "5 worked examples hold; replay matched after {turns} turns of {} dialogues (gold and lexicon NLU)",
        dialogues.len()
    ))
}

// ---------------------------------------------------------------- hybrid

/// Answers through `inner` and keeps every prompt/reply pair.
pub struct Recorder<B> {
    pub inner: B,
    pub canned: Mutex<CannedBackend>,
}

impl<B: CompletionBackend> CompletionBackend for Recorder<B> {
    fn complete(&self, req: &CompletionRequest<'_>) -> Result<String, LlmError> {
        let reply = self.inner.complete(req)?;
        self.canned.lock().unwrap().insert(req.prompt, reply.clone());
        Ok(reply)
    }
}

fn llm_engine(backend: Arc<dyn CompletionBackend>) -> Engine {
    lexicon_engine().with_tracker(TrackerMode::Llm {
        library: Arc::new(demo::prompts().clone()),
        backend,
    })
}

fn turn_json(o: &TurnOutcome) -> String {
    serde_json::to_string(&(&o.action, &o.result)).unwrap()
}

fn runs(engine: &Engine, dialogues: &[Dialogue], gold: bool) -> Result<Vec<Vec<String>>, String> {
    dialogues
        .iter()
        .map(|d| {
            let r = if gold {
                run_dialogue(engine, d, &GoldEcho::new(&d.turns), 3)
            } else {
                run_dialogue(engine, d, demo::lexicon(), 3)
            };
            r.map(|r| r.outcomes.iter().map(turn_json).collect())
                .map_err(|e| e.to_string())
        })
        .collect()
}

/// Criterion 8. The mock model is a fixed prompt-to-reply table, recorded
/// once and then replayed with no access to the turn.
pub fn hybrid_equivalence() -> Check {
    let dialogues = fixture_dialogues();
    let rule = lexicon_engine();
    let recorder = Arc::new(Recorder {
        inner: RuleEchoBackend,
        canned: Mutex::new(CannedBackend::default()),
    });
    for gold in [true, false] {
        runs(&llm_engine(recorder.clone()), &dialogues, gold)?;
    }
    let canned = recorder.canned.lock().unwrap().clone();
    let prompts = canned.len();
    let mock = llm_engine(Arc::new(canned));

    let mut compared = 0;
    for gold in [true, false] {
        let a = runs(&rule, &dialogues, gold)?;
        let b = runs(&mock, &dialogues, gold)?;
        for (d, (x, y)) in dialogues.iter().zip(a.iter().zip(&b)) {
            if let Some(i) = (0..x.len().max(y.len())).find(|&i| x.get(i) != y.get(i)) {
                return Err(format!(
                    "{} turn {i}: rule {} / mock {}",
                    d.id,
                    x.get(i).map_or("-", |s| s),
                    y.get(i).map_or("-", |s| s)
                ));
            }
            compared += x.len();
        }
    }
    Ok(format!(
        "{compared} turns over {} dialogues, 0 diffs; mock answered {prompts} distinct prompts",
        dialogues.len()
    ))
}

// ---------------------------------------------------------------- sql

const HOSTILE: [&str; 22] = [
    "'", "\"", ";", "--", "/*", "*/", "\\", "`", "\u{202e}", "\u{200f}", "\u{0627}\u{0628}", "\u{05d0}", "\0", "\n",
    "\r", "\t", "\u{1b}", "\u{7f}", "' OR '1'='1", "; DROP TABLE x; --", "\u{fe0f}", "%",
];
const PLAIN: [&str; 8] = ["a", "tehran", "1", " ", "=", "?", "*", "select"];

pub fn hostile_value(rng: &mut ChaCha8Rng) -> String {
    let mut parts: Vec<&str> = vec![HOSTILE.choose(rng).unwrap()];
    for _ in 0..rng.gen_range(0..6) {
        parts.push(if rng.gen_bool(0.5) {
            HOSTILE.choose(rng).unwrap()
        } else {
            PLAIN.choose(rng).unwrap()
        });
    }
    parts.shuffle(rng);
    parts.concat()
}

/// The only characters a query's text may contain.
pub fn text_is_clean(text: &str) -> bool {
    text.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | ' ' | '=' | '?' | '*'))
}

/// Criterion 9. Values go through the query builder directly and through a
/// full tracker turn.
pub fn sql_fuzz(values: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schemas: Vec<_> = demo::ontology().normal_intents().filter(|s| !s.slots.is_empty()).collect();
    let mut used = 0;
    let mut queries = 0;
    while used < values {
        let schema = *schemas.choose(&mut rng).unwrap();
        let mut fills = BTreeMap::new();
        for s in &schema.slots {
            if used < values && rng.gen_bool(0.7) {
                fills.insert(s.id.clone(), hostile_value(&mut rng));
                used += 1;
            }
        }
        let direct = build_query(schema, &fills).map_err(|e| e.to_string())?;
        let slots: Vec<(&str, &str)> = fills.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        let (st, _) = step(&DialogueState::new("f", 1), &nlu(&schema.id, &schema.id, &slots), Label::Confirmed)?;
        let via_tracker = emit_result(&st, demo::ontology()).map_err(|e| e.to_string())?.sql;
        for q in [&direct, &via_tracker] {
            queries += 1;
            if !text_is_clean(&q.text) {
                return Err(format!("query text {:?} holds non-identifier characters", q.text));
            }
            if let Some(v) = fills.values().find(|v| q.text.contains(v.as_str())) {
                return Err(format!("value {v:?} appears in {:?}", q.text));
            }
            if q.placeholder_count() != q.params.len() {
                return Err(format!("{} placeholders, {} params", q.placeholder_count(), q.params.len()));
            }
            let want: Vec<&String> = schema.slots.iter().filter_map(|s| fills.get(&s.id)).collect();
            if q.params.iter().collect::<Vec<_>>() != want {
                return Err(format!("params {:?} are not the fills in declaration order", q.params));
            }
        }
    }
    Ok(format!("{used} hostile values over {queries} queries; text never held a value"))
}
