//! Grid search for per-class decision offsets.

use super::gbt::{apply_offsets, Dataset, GbtModel};
use super::{Label, ValidatorError};

pub const GRID_STEP: f64 = 0.01;
/// Offsets live in [-LIMIT, LIMIT] hundredths.
const LIMIT: i32 = 50;

/// Macro-F1 over the classes that occur in either labels or predictions.
pub(crate) fn macro_f1(golds: &[Label], preds: &[Label]) -> f64 {
    let mut tp = [0u64; 3];
    let mut fp = [0u64; 3];
    let mut fn_ = [0u64; 3];
    for (g, p) in golds.iter().zip(preds) {
        if g == p {
            tp[g.index()] += 1;
        } else {
            fp[p.index()] += 1;
            fn_[g.index()] += 1;
        }
    }
    let mut sum = 0.0;
    let mut classes = 0;
    for k in 0..3 {
        let denom = 2 * tp[k] + fp[k] + fn_[k];
        if denom > 0 {
            classes += 1;
            sum += (2 * tp[k]) as f64 / denom as f64;
        }
    }
    if classes == 0 {
        0.0
    } else {
        sum / classes as f64
    }
}

fn hundredths(o: [i32; 3]) -> [f64; 3] {
    o.map(|v| v as f64 / 100.0)
}

/// Offsets on the 0.01 grid in [-0.5, 0.5] maximizing macro-F1 of
/// `argmax(p + offsets)` against `golds`. Ties prefer the smallest L1 norm,
/// then the lexicographically smallest vector.
///
/// Only the pairwise differences of the offsets change a prediction, so the
/// search runs over difference pairs and picks, for each, the member of its
/// class closest to zero.
pub fn tune_offsets(probs: &[[f64; 3]], golds: &[Label]) -> [f64; 3] {
    assert_eq!(probs.len(), golds.len(), "probabilities and labels differ in length");
    let mut best: Option<(f64, i32, [i32; 3])> = None;
    let mut preds = vec![Label::Confirmed; probs.len()];
    for d1 in -2 * LIMIT..=2 * LIMIT {
        for d2 in -2 * LIMIT..=2 * LIMIT {
            let lo = (-LIMIT).max(-LIMIT - d1).max(-LIMIT - d2);
            let hi = LIMIT.min(LIMIT - d1).min(LIMIT - d2);
            if lo > hi {
                continue;
            }
            let mut m = [0, -d1, -d2];
            m.sort_unstable();
            let a = m[1].clamp(lo, hi);
            let o = [a, a + d1, a + d2];
            let l1 = o.iter().map(|v| v.abs()).sum::<i32>();
            let off = hundredths(o);
            for (p, slot) in probs.iter().zip(preds.iter_mut()) {
                *slot = apply_offsets(p, &off);
            }
            let f1 = macro_f1(golds, &preds);
            let better = match best {
                None => true,
                Some((bf, bl, bo)) => f1 > bf || (f1 == bf && (l1 < bl || (l1 == bl && o < bo))),
            };
            if better {
                best = Some((f1, l1, o));
            }
        }
    }
    hundredths(best.map_or([0; 3], |b| b.2))
}

/// Tunes `model`'s offsets on a labelled dev set.
pub fn tune_thresholds(model: &GbtModel, dev: &Dataset) -> Result<[f64; 3], ValidatorError> {
    if dev.is_empty() {
        return Err(ValidatorError::EmptyDataset);
    }
    let probs = dev
        .x
        .iter()
        .map(|x| model.predict_proba(x))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(tune_offsets(&probs, &dev.y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::*;

    /// Brute force over every offset triple.
    fn oracle(probs: &[[f64; 3]], golds: &[Label]) -> [f64; 3] {
        let mut best: Option<(f64, i32, [i32; 3])> = None;
        for a in -LIMIT..=LIMIT {
            for b in -LIMIT..=LIMIT {
                for c in -LIMIT..=LIMIT {
                    let o = [a, b, c];
                    let off = hundredths(o);
                    let preds: Vec<Label> = probs.iter().map(|p| apply_offsets(p, &off)).collect();
                    let f1 = macro_f1(golds, &preds);
                    let l1 = a.abs() + b.abs() + c.abs();
                    let better = match best {
                        None => true,
                        Some((bf, bl, bo)) => f1 > bf || (f1 == bf && (l1 < bl || (l1 == bl && o < bo))),
                    };
                    if better {
                        best = Some((f1, l1, o));
                    }
                }
            }
        }
        hundredths(best.unwrap().2)
    }

    #[test]
    fn perfect_dev_keeps_zero_offsets() {
        let probs = [[0.8, 0.1, 0.1], [0.1, 0.7, 0.2], [0.2, 0.1, 0.7]];
        assert_eq!(tune_offsets(&probs, &[Confirmed, Ambiguous, Unclear]), [0.0; 3]);
    }

    #[test]
    fn finds_the_ambiguous_boost() {
        // ambiguous samples sit 0.15..0.19 below confirmed
        let probs = [
            [0.55, 0.40, 0.05],
            [0.56, 0.38, 0.06],
            [0.57, 0.38, 0.05],
            [0.90, 0.05, 0.05],
            [0.85, 0.10, 0.05],
            [0.80, 0.15, 0.05],
            [0.20, 0.10, 0.70],
        ];
        let golds = [Ambiguous, Ambiguous, Ambiguous, Confirmed, Confirmed, Confirmed, Unclear];
        let got = tune_offsets(&probs, &golds);
        assert_eq!(got, oracle(&probs, &golds));
        let preds: Vec<Label> = probs.iter().map(|p| apply_offsets(p, &got)).collect();
        assert_eq!(preds, golds);
        assert!(got[1] - got[0] >= 0.19 - 1e-12);
    }

    #[test]
    fn offsets_on_grid() {
        // off-grid values so no sample sits exactly on a decision boundary
        let probs = [[0.503, 0.291, 0.206], [0.453, 0.441, 0.106], [0.412, 0.203, 0.385]];
        let got = tune_offsets(&probs, &[Ambiguous, Confirmed, Confirmed]);
        for o in got {
            assert!((o * 100.0 - (o * 100.0).round()).abs() < 1e-9 && o.abs() <= 0.5);
        }
        assert_eq!(got, oracle(&probs, &[Ambiguous, Confirmed, Confirmed]));
    }

    #[test]
    fn macro_f1_counts_present_classes_only() {
        assert_eq!(macro_f1(&[Confirmed, Confirmed], &[Confirmed, Confirmed]), 1.0);
        let f = macro_f1(&[Confirmed, Confirmed, Ambiguous, Ambiguous], &[Confirmed, Ambiguous, Ambiguous, Ambiguous]);
        assert!((f - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
    }
}
