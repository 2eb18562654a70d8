//! Synthetic NLU score distributions with known validation labels, for
//! training and stress-testing the validator.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{classify_rule, FeatureState, Label, RuleThresholds, ValidatorFeatures};

/// Class mix of confirmed / ambiguous / unclear outputs in a heavily
/// skewed production log.
pub const IMBALANCED_PRIOR: [f64; 3] = [0.97, 0.02, 0.01];

const N_INTENTS: usize = 8;

fn distribution(rng: &mut ChaCha8Rng, top1: f64, top2: f64) -> BTreeMap<String, f64> {
    let rest = (1.0 - top1 - top2).max(0.0);
    let mut raw: Vec<f64> = (0..N_INTENTS - 2).map(|_| rng.gen_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter_mut().for_each(|v| *v = (*v / s * rest).min(top2));
    let mut all = vec![top1, top2];
    all.extend(raw);
    let total: f64 = all.iter().sum();
    all.shuffle(rng);
    all.into_iter()
        .enumerate()
        .map(|(i, v)| (format!("intent_{i}"), v / total))
        .collect()
}

fn sample_scores(rng: &mut ChaCha8Rng) -> BTreeMap<String, f64> {
    let top1: f64 = rng.gen_range(0.15..1.0);
    // runner-up scores skew low, as they do for a softmax head
    let top2 = top1.min(1.0 - top1) * rng.gen::<f64>().powi(2);
    distribution(rng, top1, top2)
}

fn confident_scores(rng: &mut ChaCha8Rng) -> BTreeMap<String, f64> {
    let top1: f64 = rng.gen_range(0.6..1.0);
    let top2 = rng.gen_range(0.0..=1.0 - top1);
    distribution(rng, top1, top2)
}

fn draw_label(rng: &mut ChaCha8Rng, prior: [f64; 3]) -> Label {
    let total: f64 = prior.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for l in Label::ALL {
        if u < prior[l.index()] {
            return l;
        }
        u -= prior[l.index()];
    }
    Label::Unclear
}

/// Standard normal via Box-Muller.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// The threshold rule applied to top scores blurred by Gaussian noise of
/// scale `sigma`: an annotator who agrees with the rule away from its
/// boundaries and is unsure near them.
pub fn blurred_rule_label(
    rng: &mut ChaCha8Rng,
    f: &ValidatorFeatures,
    thresholds: &RuleThresholds,
    sigma: f64,
) -> Label {
    let mut g = *f;
    g.top1 += sigma * gauss(rng);
    g.top2 += sigma * gauss(rng);
    g.margin = g.top1 - g.top2;
    classify_rule(&g, thresholds)
}

/// Default label blur.
pub const LABEL_SIGMA: f64 = 0.1;

/// `n` labelled feature vectors with class mix `prior`. Score distributions
/// are drawn broadly and labelled by [`blurred_rule_label`]; draws are
/// rejected until the label matches the class picked from `prior`. Each
/// scored turn follows a short prefix of confident turns so the temporal
/// features vary too.
pub fn imbalanced(n: usize, seed: u64, prior: [f64; 3]) -> Vec<(ValidatorFeatures, Label)> {
    imbalanced_with_blur(n, seed, prior, LABEL_SIGMA)
}

/// [`imbalanced`] with an explicit label blur.
pub fn imbalanced_with_blur(
    n: usize,
    seed: u64,
    prior: [f64; 3],
    sigma: f64,
) -> Vec<(ValidatorFeatures, Label)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let thresholds = RuleThresholds::default();
    (0..n)
        .map(|_| {
            let label = draw_label(&mut rng, prior);
            loop {
                let mut st = FeatureState::default();
                for _ in 0..rng.gen_range(0..3) {
                    let prev = confident_scores(&mut rng);
                    st.push(&prev);
                }
                let f = st.push(&sample_scores(&mut rng));
                if blurred_rule_label(&mut rng, &f, &thresholds, sigma) == label {
                    return (f, label);
                }
            }
        })
        .collect()
}

/// Labels features with the threshold rule, then replaces each label with a
/// uniformly drawn one with probability `noise`.
pub fn noisy_rule_labels(
    features: &[ValidatorFeatures],
    thresholds: &RuleThresholds,
    noise: f64,
    seed: u64,
) -> Vec<Label> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    features
        .iter()
        .map(|f| {
            let l = classify_rule(f, thresholds);
            if rng.gen::<f64>() < noise {
                Label::ALL[rng.gen_range(0..3)]
            } else {
                l
            }
        })
        .collect()
}
