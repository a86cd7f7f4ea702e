//! The lexical prior: maps the 18-field lexical vector to a 7-class
//! probability vector `s`, later used as FiLM conditioning.
//!
//! Two interchangeable model kinds share one JSON envelope:
//!
//! * `gbdt`: one binary logistic booster per class (depth-limited trees,
//!   Newton leaf values, histogram splits over at most 256 quantile bins),
//!   combined by a softmax over the per-class raw scores.
//! * `softmax_regression`: multinomial logistic regression with L2, trained
//!   by full-batch gradient descent on standardized features.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::stream_rng;
use crate::lexical::{FEATURE_NAMES, LEXICAL_DIM};
use crate::NUM_CLASSES;

pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PriorError {
    #[error("training data has {0} distinct label(s); need at least 2")]
    Degenerate(usize),
    #[error("pair {pair_id}: feature {feature} is not finite")]
    NonFinite { pair_id: String, feature: &'static str },
    #[error("label {label} of pair {pair_id} outside 0..=6")]
    BadLabel { pair_id: String, label: u8 },
    #[error("model feature_order does not match the lexical feature layout")]
    FeatureOrder,
    #[error("unsupported model version {0}")]
    Version(u32),
    #[error("invalid prior config: {0}")]
    Config(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One training row.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorExample {
    pub pair_id: String,
    pub features: [f64; LEXICAL_DIM],
    pub label: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    #[default]
    Gbdt,
    SoftmaxRegression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub kind: PriorKind,
    pub seed: u64,
    pub rounds: usize,
    pub shrinkage: f64,
    pub max_depth: usize,
    /// L2 on leaf values.
    pub lambda: f64,
    pub max_bins: usize,
    pub min_child_weight: f64,
    /// Row fraction drawn (without replacement) per boosting round.
    pub subsample: f64,
    /// L2 on softmax-regression weights.
    pub l2: f64,
    pub learning_rate: f64,
    pub iterations: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            kind: PriorKind::Gbdt,
            seed: 0,
            rounds: 100,
            shrinkage: 0.1,
            max_depth: 3,
            lambda: 1.0,
            max_bins: 256,
            min_child_weight: 1e-3,
            subsample: 1.0,
            l2: 1e-3,
            learning_rate: 0.5,
            iterations: 500,
        }
    }
}

impl PriorConfig {
    fn validate(&self) -> Result<(), PriorError> {
        let bad = |m: &str| Err(PriorError::Config(m.to_string()));
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return bad("subsample must be in (0, 1]");
        }
        if self.max_bins < 2 || self.max_bins > 256 {
            return bad("max_bins must be in 2..=256");
        }
        if self.shrinkage <= 0.0 || self.learning_rate <= 0.0 {
            return bad("step sizes must be positive");
        }
        if self.lambda < 0.0 || self.l2 < 0.0 {
            return bad("regularization must be non-negative");
        }
        Ok(())
    }
}

/// Tree node; children are indices into the owning tree's node list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreeNode {
    Split {
        feature: usize,
        /// `x[feature] <= threshold` goes left.
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBooster {
    pub base_score: f64,
    pub shrinkage: f64,
    pub trees: Vec<Tree>,
}

impl ClassBooster {
    pub fn raw_score(&self, x: &[f64]) -> f64 {
        self.base_score + self.shrinkage * self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub classes: Vec<ClassBooster>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `NUM_CLASSES` rows of `LEXICAL_DIM` weights.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "parameters", rename_all = "snake_case")]
pub enum PriorParams {
    Gbdt(GbdtModel),
    SoftmaxRegression(LinearModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorModel {
    pub version: u32,
    pub feature_order: Vec<String>,
    #[serde(flatten)]
    pub params: PriorParams,
}

impl PriorModel {
    pub fn kind(&self) -> PriorKind {
        match self.params {
            PriorParams::Gbdt(_) => PriorKind::Gbdt,
            PriorParams::SoftmaxRegression(_) => PriorKind::SoftmaxRegression,
        }
    }

    pub fn check(&self) -> Result<(), PriorError> {
        if self.version != MODEL_VERSION {
            return Err(PriorError::Version(self.version));
        }
        if self.feature_order.len() != LEXICAL_DIM || self.feature_order.iter().zip(FEATURE_NAMES).any(|(a, b)| a != b) {
            return Err(PriorError::FeatureOrder);
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, PriorError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, PriorError> {
        let m: Self = serde_json::from_str(s)?;
        m.check()?;
        Ok(m)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), PriorError> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, PriorError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = z.map(|v| (v - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn check_examples(data: &[PriorExample]) -> Result<(), PriorError> {
    let mut seen = [false; NUM_CLASSES];
    for ex in data {
        if ex.label as usize >= NUM_CLASSES {
            return Err(PriorError::BadLabel {
                pair_id: ex.pair_id.clone(),
                label: ex.label,
            });
        }
        if let Some(i) = ex.features.iter().position(|v| !v.is_finite()) {
            return Err(PriorError::NonFinite {
                pair_id: ex.pair_id.clone(),
                feature: FEATURE_NAMES[i],
            });
        }
        seen[ex.label as usize] = true;
    }
    let distinct = seen.iter().filter(|&&s| s).count();
    if distinct < 2 {
        return Err(PriorError::Degenerate(distinct));
    }
    Ok(())
}

pub fn fit_prior(data: &[PriorExample], config: &PriorConfig) -> Result<PriorModel, PriorError> {
    config.validate()?;
    check_examples(data)?;
    let params = match config.kind {
        PriorKind::Gbdt => PriorParams::Gbdt(fit_gbdt(data, config)),
        PriorKind::SoftmaxRegression => PriorParams::SoftmaxRegression(fit_softmax(data, config)),
    };
    Ok(PriorModel {
        version: MODEL_VERSION,
        feature_order: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        params,
    })
}

pub fn predict_prior(model: &PriorModel, x: &[f64; LEXICAL_DIM]) -> Result<[f64; NUM_CLASSES], PriorError> {
    model.check()?;
    Ok(predict_unchecked(model, x))
}

fn predict_unchecked(model: &PriorModel, x: &[f64; LEXICAL_DIM]) -> [f64; NUM_CLASSES] {
    let z: [f64; NUM_CLASSES] = match &model.params {
        PriorParams::Gbdt(g) => std::array::from_fn(|c| g.classes[c].raw_score(x)),
        PriorParams::SoftmaxRegression(m) => {
            let xs: Vec<f64> = (0..LEXICAL_DIM).map(|j| (x[j] - m.mean[j]) / m.scale[j]).collect();
            std::array::from_fn(|c| m.bias[c] + m.weights[c].iter().zip(&xs).map(|(w, v)| w * v).sum::<f64>())
        }
    };
    softmax(&z)
}

/// Batch prediction; order-preserving and safe to parallelize.
pub fn predict_batch(model: &PriorModel, xs: &[[f64; LEXICAL_DIM]]) -> Result<Vec<[f64; NUM_CLASSES]>, PriorError> {
    model.check()?;
    Ok(xs.par_iter().map(|x| predict_unchecked(model, x)).collect())
}

/// Cache row: `{"pair_id","prior":[7 floats]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorCacheRow {
    pub pair_id: String,
    pub prior: [f64; NUM_CLASSES],
}

// ---- gbdt ----

/// Per-feature split candidates and the bin index of every row.
struct Binned {
    thresholds: Vec<Vec<f64>>,
    /// bins[f][i]: number of thresholds strictly below x[i][f]; equals the
    /// left-child count boundary for the split at that threshold index.
    bins: Vec<Vec<u16>>,
}

fn bin_features(data: &[PriorExample], max_bins: usize) -> Binned {
    let mut thresholds = Vec::with_capacity(LEXICAL_DIM);
    let mut bins = Vec::with_capacity(LEXICAL_DIM);
    for f in 0..LEXICAL_DIM {
        let mut vals: Vec<f64> = data.iter().map(|e| e.features[f]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        let cuts: Vec<f64> = if vals.len() <= max_bins {
            vals.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
        } else {
            let mut c: Vec<f64> = (1..max_bins)
                .map(|k| {
                    let i = k * vals.len() / max_bins;
                    0.5 * (vals[i - 1] + vals[i])
                })
                .collect();
            c.dedup();
            c
        };
        bins.push(
            data.iter()
                .map(|e| cuts.partition_point(|&t| t < e.features[f]) as u16)
                .collect(),
        );
        thresholds.push(cuts);
    }
    Binned { thresholds, bins }
}

struct SplitChoice {
    feature: usize,
    cut: usize,
    gain: f64,
}

fn best_split(rows: &[usize], g: &[f64], h: &[f64], binned: &Binned, cfg: &PriorConfig) -> Option<SplitChoice> {
    let (gt, ht): (f64, f64) = rows.iter().fold((0.0, 0.0), |(a, b), &i| (a + g[i], b + h[i]));
    let parent = gt * gt / (ht + cfg.lambda);
    let mut best: Option<SplitChoice> = None;
    for f in 0..LEXICAL_DIM {
        let ncuts = binned.thresholds[f].len();
        if ncuts == 0 {
            continue;
        }
        let mut hg = vec![0.0; ncuts + 1];
        let mut hh = vec![0.0; ncuts + 1];
        for &i in rows {
            let b = binned.bins[f][i] as usize;
            hg[b] += g[i];
            hh[b] += h[i];
        }
        let (mut gl, mut hl) = (0.0, 0.0);
        for cut in 0..ncuts {
            gl += hg[cut];
            hl += hh[cut];
            let (gr, hr) = (gt - gl, ht - hl);
            if hl < cfg.min_child_weight || hr < cfg.min_child_weight {
                continue;
            }
            let gain = gl * gl / (hl + cfg.lambda) + gr * gr / (hr + cfg.lambda) - parent;
            if gain > 1e-12 && best.as_ref().map_or(true, |b| gain > b.gain) {
                best = Some(SplitChoice { feature: f, cut, gain });
            }
        }
    }
    best
}

fn grow(rows: Vec<usize>, depth: usize, g: &[f64], h: &[f64], binned: &Binned, cfg: &PriorConfig, nodes: &mut Vec<TreeNode>) -> usize {
    let id = nodes.len();
    let leaf = |rows: &[usize]| {
        let (gs, hs) = rows.iter().fold((0.0, 0.0), |(a, b), &i| (a + g[i], b + h[i]));
        TreeNode::Leaf {
            value: -gs / (hs + cfg.lambda),
        }
    };
    let split = if depth < cfg.max_depth {
        best_split(&rows, g, h, binned, cfg)
    } else {
        None
    };
    let Some(s) = split else {
        nodes.push(leaf(&rows));
        return id;
    };
    nodes.push(TreeNode::Leaf { value: 0.0 });
    let (l, r): (Vec<usize>, Vec<usize>) = rows.into_iter().partition(|&i| (binned.bins[s.feature][i] as usize) <= s.cut);
    let left = grow(l, depth + 1, g, h, binned, cfg, nodes);
    let right = grow(r, depth + 1, g, h, binned, cfg, nodes);
    nodes[id] = TreeNode::Split {
        feature: s.feature,
        threshold: binned.thresholds[s.feature][s.cut],
        left,
        right,
    };
    id
}

fn fit_gbdt(data: &[PriorExample], cfg: &PriorConfig) -> GbdtModel {
    let n = data.len();
    let binned = bin_features(data, cfg.max_bins);
    let classes = (0..NUM_CLASSES)
        .into_par_iter()
        .map(|c| {
            let y: Vec<f64> = data.iter().map(|e| f64::from(e.label as usize == c)).collect();
            let pos = y.iter().sum::<f64>();
            let prior = (pos + 1.0) / (n as f64 + 2.0);
            let base_score = (prior / (1.0 - prior)).ln();
            let mut booster = ClassBooster {
                base_score,
                shrinkage: cfg.shrinkage,
                trees: Vec::new(),
            };
            if pos == 0.0 {
                return booster;
            }
            let mut score = vec![base_score; n];
            let mut rng = stream_rng(cfg.seed, c as u64);
            let take = ((cfg.subsample * n as f64).round() as usize).clamp(1, n);
            for _ in 0..cfg.rounds {
                let p: Vec<f64> = score.iter().map(|&s| sigmoid(s)).collect();
                let g: Vec<f64> = p.iter().zip(&y).map(|(p, y)| p - y).collect();
                let h: Vec<f64> = p.iter().map(|p| (p * (1.0 - p)).max(1e-16)).collect();
                let rows: Vec<usize> = if take == n {
                    (0..n).collect()
                } else {
                    let mut r = index::sample(&mut rng, n, take).into_vec();
                    r.sort_unstable();
                    r
                };
                let mut nodes = Vec::new();
                grow(rows, 0, &g, &h, &binned, cfg, &mut nodes);
                let tree = Tree { nodes };
                for (i, s) in score.iter_mut().enumerate() {
                    *s += cfg.shrinkage * tree.predict(&data[i].features);
                }
                booster.trees.push(tree);
            }
            booster
        })
        .collect();
    GbdtModel { classes }
}

// ---- softmax regression ----

fn fit_softmax(data: &[PriorExample], cfg: &PriorConfig) -> LinearModel {
    let n = data.len() as f64;
    let mut mean = vec![0.0; LEXICAL_DIM];
    for e in data {
        for j in 0..LEXICAL_DIM {
            mean[j] += e.features[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut scale = vec![0.0; LEXICAL_DIM];
    for e in data {
        for j in 0..LEXICAL_DIM {
            scale[j] += (e.features[j] - mean[j]).powi(2);
        }
    }
    for s in scale.iter_mut() {
        *s = (*s / n).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    let xs: Vec<[f64; LEXICAL_DIM]> = data
        .iter()
        .map(|e| std::array::from_fn(|j| (e.features[j] - mean[j]) / scale[j]))
        .collect();

    let mut w = vec![vec![0.0; LEXICAL_DIM]; NUM_CLASSES];
    let mut b = vec![0.0; NUM_CLASSES];
    for _ in 0..cfg.iterations {
        let mut gw = vec![vec![0.0; LEXICAL_DIM]; NUM_CLASSES];
        let mut gb = vec![0.0; NUM_CLASSES];
        for (x, e) in xs.iter().zip(data) {
            let z: [f64; NUM_CLASSES] =
                std::array::from_fn(|c| b[c] + w[c].iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>());
            let p = softmax(&z);
            for c in 0..NUM_CLASSES {
                let d = p[c] - f64::from(e.label as usize == c);
                gb[c] += d;
                for j in 0..LEXICAL_DIM {
                    gw[c][j] += d * x[j];
                }
            }
        }
        for c in 0..NUM_CLASSES {
            b[c] -= cfg.learning_rate * gb[c] / n;
            for j in 0..LEXICAL_DIM {
                w[c][j] -= cfg.learning_rate * (gw[c][j] / n + cfg.l2 * w[c][j]);
            }
        }
    }
    LinearModel {
        mean,
        scale,
        weights: w,
        bias: b,
    }
}
