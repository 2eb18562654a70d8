//! Multiclass gradient boosting with a softmax objective: one regression
//! tree per class per round, second-order leaf values, histogram splits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{argmax3, Label, ValidatorError, ValidatorFeatures};

const N_CLASSES: usize = 3;
const MAX_BINS: usize = 256;
/// How often a round's step is halved before boosting stops.
const MAX_HALVINGS: u32 = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Node {
    Split {
        feat: usize,
        thr: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
    Leaf {
        leaf: f64,
    },
}

impl Node {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                Node::Leaf { leaf } => return *leaf,
                Node::Split { feat, thr, left, right } => {
                    node = if x[*feat] <= *thr { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    fn scale(&mut self, s: f64) {
        match self {
            Node::Leaf { leaf } => *leaf *= s,
            Node::Split { left, right, .. } => {
                left.scale(s);
                right.scale(s);
            }
        }
    }

    fn check(&self, n_features: usize) -> Result<(), String> {
        match self {
            Node::Leaf { leaf } if leaf.is_finite() => Ok(()),
            Node::Leaf { leaf } => Err(format!("non-finite leaf {leaf}")),
            Node::Split { feat, thr, left, right } => {
                if *feat >= n_features {
                    return Err(format!("feature {feat} out of range"));
                }
                if thr.is_nan() {
                    return Err("NaN threshold".into());
                }
                left.check(n_features)?;
                right.check(n_features)
            }
        }
    }
}

fn default_n_features() -> usize {
    super::N_FEATURES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub n_classes: usize,
    #[serde(default = "default_n_features")]
    pub n_features: usize,
    pub learning_rate: f64,
    pub class_weights: Vec<f64>,
    /// Per-class offsets added to the probabilities before the argmax.
    pub thresholds: Vec<f64>,
    /// One entry per boosting round, each holding one tree per class.
    pub trees: Vec<Vec<Node>>,
}

impl GbtModel {
    pub fn from_json(text: &str) -> Result<Self, ValidatorError> {
        let m: GbtModel =
            serde_json::from_str(text).map_err(|e| ValidatorError::MalformedModel(e.to_string()))?;
        m.check()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    fn check(&self) -> Result<(), ValidatorError> {
        let bad = |m: String| Err(ValidatorError::MalformedModel(m));
        if self.n_classes != N_CLASSES {
            return bad(format!("n_classes must be {N_CLASSES}"));
        }
        if self.class_weights.len() != N_CLASSES || self.thresholds.len() != N_CLASSES {
            return bad("class_weights and thresholds need one entry per class".into());
        }
        if self.class_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return bad("class weights must be positive".into());
        }
        if self.thresholds.iter().any(|t| !t.is_finite()) {
            return bad("non-finite threshold".into());
        }
        for (r, round) in self.trees.iter().enumerate() {
            if round.len() != N_CLASSES {
                return bad(format!("round {r} has {} trees", round.len()));
            }
            for t in round {
                t.check(self.n_features).or_else(|m| bad(format!("round {r}: {m}")))?;
            }
        }
        Ok(())
    }

    pub fn raw_scores(&self, x: &[f64]) -> [f64; 3] {
        let mut raw = [0.0; 3];
        for round in &self.trees {
            for (k, t) in round.iter().enumerate() {
                raw[k] += t.eval(x);
            }
        }
        raw
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<[f64; 3], ValidatorError> {
        if x.len() != self.n_features {
            return Err(ValidatorError::DimensionMismatch {
                expected: self.n_features,
                found: x.len(),
            });
        }
        Ok(softmax3(&self.raw_scores(x)))
    }

    /// Label after threshold offsets, and the unadjusted probabilities.
    pub fn classify(&self, x: &[f64]) -> Result<(Label, [f64; 3]), ValidatorError> {
        let p = self.predict_proba(x)?;
        Ok((apply_offsets(&p, &self.thresholds), p))
    }

    pub fn predict(&self, f: &ValidatorFeatures) -> Result<(Label, [f64; 3]), ValidatorError> {
        self.classify(&f.vector())
    }
}

pub(crate) fn apply_offsets(p: &[f64; 3], offsets: &[f64]) -> Label {
    let adj = [p[0] + offsets[0], p[1] + offsets[1], p[2] + offsets[2]];
    Label::from_index(argmax3(&adj)).expect("three classes")
}

fn softmax3(raw: &[f64; 3]) -> [f64; 3] {
    let m = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = [(raw[0] - m).exp(), (raw[1] - m).exp(), (raw[2] - m).exp()];
    let s = e[0] + e[1] + e[2];
    [e[0] / s, e[1] / s, e[2] / s]
}

fn log_loss(raw: &[f64; 3], y: usize) -> f64 {
    let m = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + raw.iter().map(|r| (r - m).exp()).sum::<f64>().ln();
    lse - raw[y]
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Label>,
}

impl Dataset {
    pub fn from_features<I: IntoIterator<Item = (ValidatorFeatures, Label)>>(it: I) -> Self {
        let mut d = Dataset::default();
        for (f, l) in it {
            d.x.push(f.vector());
            d.y.push(l);
        }
        d
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn class_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for l in &self.y {
            c[l.index()] += 1;
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeights {
    Uniform,
    /// `n_max / n_c`, capped at 50.
    Balanced,
    Explicit([f64; 3]),
}

impl ClassWeights {
    pub fn resolve(&self, counts: [usize; 3]) -> [f64; 3] {
        match *self {
            ClassWeights::Uniform => [1.0; 3],
            ClassWeights::Explicit(w) => w,
            ClassWeights::Balanced => {
                let max = *counts.iter().max().unwrap_or(&0) as f64;
                counts.map(|c| if c == 0 { 1.0 } else { (max / c as f64).min(50.0) })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbtParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub class_weights: ClassWeights,
    pub seed: u64,
    /// Row sampling rate per round.
    pub subsample: f64,
    /// L2 penalty on leaf values.
    pub lambda: f64,
    pub min_child_weight: f64,
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams {
            n_trees: 50,
            max_depth: 3,
            learning_rate: 0.1,
            class_weights: ClassWeights::Balanced,
            seed: 0,
            subsample: 1.0,
            lambda: 1.0,
            min_child_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Weighted training log-loss before the first round and after each kept round.
    pub loss_history: Vec<f64>,
    pub stopped_early: bool,
}

struct Binned {
    /// Per feature, ascending candidate thresholds.
    thresholds: Vec<Vec<f64>>,
    /// Per feature, per row: number of thresholds strictly below the value.
    bins: Vec<Vec<u16>>,
}

fn bin_features(x: &[Vec<f64>], d: usize) -> Binned {
    let mut thresholds = Vec::with_capacity(d);
    let mut bins = Vec::with_capacity(d);
    for f in 0..d {
        let mut vals: Vec<f64> = x.iter().map(|r| r[f]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        let thr = if vals.len() <= MAX_BINS {
            vals
        } else {
            let n = vals.len();
            let mut t: Vec<f64> = (1..=MAX_BINS).map(|b| vals[b * n / MAX_BINS - 1]).collect();
            t.dedup();
            t
        };
        bins.push(
            x.iter()
                .map(|r| thr.partition_point(|t| *t < r[f]) as u16)
                .collect(),
        );
        thresholds.push(thr);
    }
    Binned { thresholds, bins }
}

struct Grower<'a> {
    binned: &'a Binned,
    g: &'a [f64],
    h: &'a [f64],
    params: &'a GbtParams,
}

impl Grower<'_> {
    fn leaf(&self, rows: &[usize]) -> Node {
        let (gs, hs) = rows.iter().fold((0.0, 0.0), |(a, b), &i| (a + self.g[i], b + self.h[i]));
        Node::Leaf {
            leaf: -gs / (hs + self.params.lambda) * self.params.learning_rate,
        }
    }

    fn grow(&self, rows: Vec<usize>, depth: usize) -> Node {
        if depth >= self.params.max_depth || rows.len() < 2 {
            return self.leaf(&rows);
        }
        let lambda = self.params.lambda;
        let mcw = self.params.min_child_weight;
        let (gt, ht) = rows.iter().fold((0.0, 0.0), |(a, b), &i| (a + self.g[i], b + self.h[i]));
        let parent = gt * gt / (ht + lambda);

        let mut best: Option<(f64, usize, usize)> = None;
        for (f, thr) in self.binned.thresholds.iter().enumerate() {
            let nb = thr.len() + 1;
            let mut hg = vec![0.0; nb];
            let mut hh = vec![0.0; nb];
            let mut hc = vec![0usize; nb];
            let col = &self.binned.bins[f];
            for &i in &rows {
                let b = col[i] as usize;
                hg[b] += self.g[i];
                hh[b] += self.h[i];
                hc[b] += 1;
            }
            let (mut gl, mut hl, mut cl) = (0.0, 0.0, 0);
            for b in 0..thr.len() {
                gl += hg[b];
                hl += hh[b];
                cl += hc[b];
                let cr = rows.len() - cl;
                if cl == 0 || cr == 0 {
                    continue;
                }
                let (gr, hr) = (gt - gl, ht - hl);
                if hl < mcw || hr < mcw {
                    continue;
                }
                let gain = gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - parent;
                if gain > 1e-12 && best.is_none_or(|(bg, _, _)| gain > bg) {
                    best = Some((gain, f, b));
                }
            }
        }
        let Some((_, f, b)) = best else {
            return self.leaf(&rows);
        };
        let col = &self.binned.bins[f];
        let (l, r): (Vec<usize>, Vec<usize>) = rows.into_iter().partition(|&i| col[i] as usize <= b);
        Node::Split {
            feat: f,
            thr: self.binned.thresholds[f][b],
            left: Box::new(self.grow(l, depth + 1)),
            right: Box::new(self.grow(r, depth + 1)),
        }
    }
}

fn weighted_loss(f: &[[f64; 3]], y: &[usize], w: &[f64], wsum: f64) -> f64 {
    f.iter().zip(y).zip(w).map(|((r, &y), w)| w * log_loss(r, y)).sum::<f64>() / wsum
}

/// Trains a three-class ensemble. Each round's step is halved until the
/// weighted training loss does not increase; if that never happens the round
/// is discarded and training stops, so the loss history is non-increasing.
pub fn train_gbt(data: &Dataset, params: &GbtParams) -> Result<(GbtModel, TrainReport), ValidatorError> {
    if data.is_empty() {
        return Err(ValidatorError::EmptyDataset);
    }
    if data.x.len() != data.y.len() {
        return Err(ValidatorError::InvalidParams("x and y lengths differ".into()));
    }
    if !(params.learning_rate > 0.0 && params.learning_rate.is_finite()) {
        return Err(ValidatorError::InvalidParams("learning_rate must be positive".into()));
    }
    if !(params.subsample > 0.0 && params.subsample <= 1.0) {
        return Err(ValidatorError::InvalidParams("subsample must be in (0, 1]".into()));
    }
    if params.lambda < 0.0 {
        return Err(ValidatorError::InvalidParams("lambda must be non-negative".into()));
    }
    let d = data.x[0].len();
    for (i, row) in data.x.iter().enumerate() {
        if row.len() != d {
            return Err(ValidatorError::DimensionMismatch { expected: d, found: row.len() });
        }
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(ValidatorError::NonFinite { sample: i, feature: j });
        }
    }
    let weights = params.class_weights.resolve(data.class_counts());
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(ValidatorError::InvalidParams("class weights must be positive".into()));
    }

    let n = data.len();
    let y: Vec<usize> = data.y.iter().map(|l| l.index()).collect();
    let w: Vec<f64> = y.iter().map(|&c| weights[c]).collect();
    let wsum: f64 = w.iter().sum();
    let binned = bin_features(&data.x, d);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let mut f = vec![[0.0f64; 3]; n];
    let mut loss = weighted_loss(&f, &y, &w, wsum);
    let mut report = TrainReport {
        loss_history: vec![loss],
        stopped_early: false,
    };
    let mut trees = Vec::with_capacity(params.n_trees);
    let mut g = vec![0.0; n];
    let mut h = vec![0.0; n];

    'rounds: for _ in 0..params.n_trees {
        let rows: Vec<usize> = if params.subsample < 1.0 {
            (0..n).filter(|_| rng.gen::<f64>() < params.subsample).collect()
        } else {
            (0..n).collect()
        };
        let probs: Vec<[f64; 3]> = f.iter().map(softmax3).collect();
        let mut round = Vec::with_capacity(N_CLASSES);
        #[allow(clippy::needless_range_loop)]
        for k in 0..N_CLASSES {
            for i in 0..n {
                let p = probs[i][k];
                let target = if y[i] == k { 1.0 } else { 0.0 };
                g[i] = w[i] * (p - target);
                h[i] = (w[i] * p * (1.0 - p)).max(1e-16);
            }
            let grower = Grower { binned: &binned, g: &g, h: &h, params };
            round.push(grower.grow(rows.clone(), 0));
        }
        let delta: Vec<[f64; 3]> = data
            .x
            .iter()
            .map(|x| [round[0].eval(x), round[1].eval(x), round[2].eval(x)])
            .collect();

        let mut scale = 1.0;
        for _ in 0..=MAX_HALVINGS {
            let cand: Vec<[f64; 3]> = f
                .iter()
                .zip(&delta)
                .map(|(a, b)| [a[0] + scale * b[0], a[1] + scale * b[1], a[2] + scale * b[2]])
                .collect();
            let cand_loss = weighted_loss(&cand, &y, &w, wsum);
            if cand_loss <= loss {
                if scale != 1.0 {
                    round.iter_mut().for_each(|t| t.scale(scale));
                }
                f = cand;
                loss = cand_loss;
                report.loss_history.push(loss);
                trees.push(round);
                continue 'rounds;
            }
            scale *= 0.5;
        }
        report.stopped_early = true;
        break;
    }

    let model = GbtModel {
        n_classes: N_CLASSES,
        n_features: d,
        learning_rate: params.learning_rate,
        class_weights: weights.to_vec(),
        thresholds: vec![0.0; N_CLASSES],
        trees,
    };
    Ok((model, report))
}
