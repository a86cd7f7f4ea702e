//! The trainable fusion head.
//!
//! ```text
//! [γ | β]  = W2 · tanh(W1 s + b1) + b2          (W2, b2 start at zero)
//! hm       = (1 + γ) ⊙ h + β
//! T_i      = E_i · v_i + P_i                     i = 0..6
//! α        = softmax_i( (Wq hm) · (Wk T_i) / √d_k )
//! y        = LayerNorm(hm + Σ α_i Wv T_i)
//! p        = softmax(Wc y + bc)
//! ```
//!
//! `h` is the pair embedding (width `d`), `s` the 7-class prior and `v`
//! the 6-dim structural vector. Everything runs in f64 with hand-written
//! backpropagation; checkpoints store f32.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::stream_rng;
use crate::metrics::rank_labels;
use crate::syntax::STRUCTURAL_DIM;
use crate::NUM_CLASSES;

pub const LN_EPS: f64 = 1e-5;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FusionError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dim {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value after stage {0}")]
    NonFinite(&'static str),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(&'static str),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("label {0} outside 0..=6")]
    BadLabel(u8),
    #[error("sample {0} has no label")]
    Unlabelled(String),
    #[error("invalid fusion config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub d_k: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub label_smoothing: f64,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            d_k: 64,
            hidden: 32,
            epochs: 5,
            batch_size: 32,
            learning_rate: 1e-4,
            warmup_steps: 80,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            label_smoothing: 0.1,
            seed: 0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        let bad = |m: &str| Err(FusionError::Config(m.to_string()));
        if self.d_k == 0 || self.hidden == 0 {
            return bad("d_k and hidden must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must be in [0, 1)");
        }
        Ok(())
    }
}

/// Index of each tensor inside [`FusionParams::tensors`].
pub mod idx {
    pub const W1: usize = 0;
    pub const B1: usize = 1;
    pub const W2: usize = 2;
    pub const B2: usize = 3;
    pub const EMBED: usize = 4;
    pub const POS: usize = 5;
    pub const WQ: usize = 6;
    pub const WK: usize = 7;
    pub const WV: usize = 8;
    pub const LN_GAIN: usize = 9;
    pub const LN_BIAS: usize = 10;
    pub const WC: usize = 11;
    pub const BC: usize = 12;
}

pub const TENSOR_NAMES: [&str; 13] = [
    "mlp_prior.w1",
    "mlp_prior.b1",
    "mlp_prior.w2",
    "mlp_prior.b2",
    "struct_embed.scale",
    "struct_embed.position",
    "attention.w_q",
    "attention.w_k",
    "attention.w_v",
    "layer_norm.gain",
    "layer_norm.bias",
    "classifier.w",
    "classifier.b",
];

/// Matrices take decoupled weight decay; vectors do not.
const DECAYED: [bool; 13] = [true, false, true, false, true, true, true, true, true, false, false, true, false];

/// Row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub d: usize,
    pub d_k: usize,
    pub hidden: usize,
    pub seed: u64,
    pub tensors: Vec<Tensor>,
}

fn shapes(d: usize, d_k: usize, hidden: usize) -> [Vec<usize>; 13] {
    [
        vec![hidden, NUM_CLASSES],
        vec![hidden],
        vec![2 * d, hidden],
        vec![2 * d],
        vec![STRUCTURAL_DIM, d_k],
        vec![STRUCTURAL_DIM, d_k],
        vec![d_k, d],
        vec![d_k, d_k],
        vec![d, d_k],
        vec![d],
        vec![d],
        vec![NUM_CLASSES, d],
        vec![NUM_CLASSES],
    ]
}

impl FusionParams {
    /// All-zero parameters (LayerNorm gain zero too).
    pub fn zeros(d: usize, d_k: usize, hidden: usize) -> Self {
        Self {
            d,
            d_k,
            hidden,
            seed: 0,
            tensors: shapes(d, d_k, hidden).iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// Seeded initialization: Glorot-uniform matrices, unit LayerNorm gain,
    /// zero FiLM output layer and classifier bias = `log_prior`.
    pub fn init(d: usize, d_k: usize, hidden: usize, log_prior: [f64; NUM_CLASSES], seed: u64) -> Self {
        let mut p = Self::zeros(d, d_k, hidden);
        p.seed = seed;
        let mut rng = stream_rng(seed, 0);
        for i in [idx::W1, idx::EMBED, idx::POS, idx::WQ, idx::WK, idx::WV, idx::WC] {
            let t = &mut p.tensors[i];
            let limit = (6.0 / (t.shape[0] + t.shape[1]) as f64).sqrt();
            for x in t.data.iter_mut() {
                *x = rng.random_range(-limit..limit);
            }
        }
        p.tensors[idx::LN_GAIN].data.fill(1.0);
        p.tensors[idx::BC].data.copy_from_slice(&log_prior);
        p
    }

    pub fn t(&self, i: usize) -> &[f64] {
        &self.tensors[i].data
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }
}

/// Smoothed log class priors `ln((count_c + 1) / (n + 7))`.
pub fn log_class_prior(labels: impl IntoIterator<Item = u8>) -> [f64; NUM_CLASSES] {
    let mut counts = [0usize; NUM_CLASSES];
    let mut n = 0;
    for l in labels {
        counts[l as usize] += 1;
        n += 1;
    }
    counts.map(|c| ((c as f64 + 1.0) / (n as f64 + NUM_CLASSES as f64)).ln())
}

/// One model input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSample {
    pub pair_id: String,
    /// pair embedding, width `d`
    pub h: Vec<f64>,
    pub s: [f64; NUM_CLASSES],
    pub v: [f64; STRUCTURAL_DIM],
    pub label: Option<u8>,
}

/// Everything known about one pair before fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBundle {
    pub pair_id: String,
    pub lexical: Vec<f64>,
    pub structural: [f64; STRUCTURAL_DIM],
    pub prior: [f64; NUM_CLASSES],
    pub left: Vec<f32>,
    pub right: Vec<f32>,
    pub label: Option<u8>,
}

impl FeatureBundle {
    /// Fusion input with `h = [left ‖ right]`.
    pub fn to_sample(&self) -> Result<FusionSample, FusionError> {
        if self.left.len() != self.right.len() {
            return Err(FusionError::Dim {
                what: "pair embeddings",
                expected: self.left.len(),
                got: self.right.len(),
            });
        }
        Ok(FusionSample {
            pair_id: self.pair_id.clone(),
            h: self.left.iter().chain(&self.right).map(|&x| f64::from(x)).collect(),
            s: self.prior,
            v: self.structural,
            label: self.label,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityDistribution {
    pub p: [f64; NUM_CLASSES],
    pub confidence: f64,
    /// (label, probability), descending; ties to the lower label
    pub top3: [(u8, f64); 3],
}

impl ProbabilityDistribution {
    pub fn new(p: [f64; NUM_CLASSES]) -> Self {
        let order = rank_labels(&p);
        Self {
            p,
            confidence: p[order[0]],
            top3: std::array::from_fn(|i| (order[i] as u8, p[order[i]])),
        }
    }

    pub fn label(&self) -> u8 {
        self.top3[0].0
    }
}

// ---- small dense helpers ----

/// `W x` for `W` of shape (rows, x.len()).
fn matvec(w: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    w.chunks_exact(cols).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// `Wᵀ y` for `W` of shape (y.len(), cols), accumulated into `out`.
fn matvec_t_add(w: &[f64], y: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (row, &yi) in w.chunks_exact(cols).zip(y) {
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += wij * yi;
        }
    }
}

/// `G += a bᵀ`.
fn outer_add(g: &mut [f64], a: &[f64], b: &[f64]) {
    for (row, &ai) in g.chunks_exact_mut(b.len()).zip(a) {
        for (gij, &bj) in row.iter_mut().zip(b) {
            *gij += ai * bj;
        }
    }
}

fn softmax_vec(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn finite(stage: &'static str, v: &[f64]) -> Result<(), FusionError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(FusionError::NonFinite(stage))
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace {
    pub a1: Vec<f64>,
    pub gamma_beta: Vec<f64>,
    pub hm: Vec<f64>,
    pub tokens: Vec<Vec<f64>>,
    pub q: Vec<f64>,
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub xhat: Vec<f64>,
    pub inv_std: f64,
    pub y: Vec<f64>,
    pub logits: [f64; NUM_CLASSES],
}

fn check_sample(params: &FusionParams, h: &[f64]) -> Result<(), FusionError> {
    if h.len() != params.d {
        return Err(FusionError::Dim {
            what: "semantic input",
            expected: params.d,
            got: h.len(),
        });
    }
    Ok(())
}

/// `(1 + γ) ⊙ h + β` with `[γ | β] = MLP_prior(s)`.
pub fn film_modulate(h: &[f64], s: &[f64; NUM_CLASSES], params: &FusionParams) -> Result<Vec<f64>, FusionError> {
    check_sample(params, h)?;
    let (_, _, hm) = film_parts(h, s, params);
    finite("film", &hm)?;
    Ok(hm)
}

fn film_parts(h: &[f64], s: &[f64; NUM_CLASSES], p: &FusionParams) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = p.d;
    let a1: Vec<f64> = matvec(p.t(idx::W1), s)
        .iter()
        .zip(p.t(idx::B1))
        .map(|(z, b)| (z + b).tanh())
        .collect();
    let gb: Vec<f64> = matvec(p.t(idx::W2), &a1).iter().zip(p.t(idx::B2)).map(|(z, b)| z + b).collect();
    let hm = (0..d).map(|j| (1.0 + gb[j]) * h[j] + gb[d + j]).collect();
    (a1, gb, hm)
}

/// Structural cross-attention with residual and LayerNorm. Returns the
/// normalized output and the 6 attention weights.
pub fn cross_attend(hm: &[f64], v: &[f64; STRUCTURAL_DIM], params: &FusionParams) -> Result<(Vec<f64>, Vec<f64>), FusionError> {
    check_sample(params, hm)?;
    let t = attend_parts(hm, v, params)?;
    Ok((t.y, t.alpha))
}

struct AttendParts {
    tokens: Vec<Vec<f64>>,
    q: Vec<f64>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: f64,
    y: Vec<f64>,
}

fn attend_parts(hm: &[f64], v: &[f64; STRUCTURAL_DIM], p: &FusionParams) -> Result<AttendParts, FusionError> {
    let (d, dk) = (p.d, p.d_k);
    let (e, pos) = (p.t(idx::EMBED), p.t(idx::POS));
    let tokens: Vec<Vec<f64>> = (0..STRUCTURAL_DIM)
        .map(|i| (0..dk).map(|j| e[i * dk + j] * v[i] + pos[i * dk + j]).collect())
        .collect();
    let q = matvec(p.t(idx::WQ), hm);
    let keys: Vec<Vec<f64>> = tokens.iter().map(|t| matvec(p.t(idx::WK), t)).collect();
    let values: Vec<Vec<f64>> = tokens.iter().map(|t| matvec(p.t(idx::WV), t)).collect();
    let scale = (dk as f64).sqrt();
    let scores: Vec<f64> = keys
        .iter()
        .map(|k| k.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / scale)
        .collect();
    finite("attention scores", &scores)?;
    let alpha = softmax_vec(&scores);
    let mut r = hm.to_vec();
    for (a, val) in alpha.iter().zip(&values) {
        for (ri, vi) in r.iter_mut().zip(val) {
            *ri += a * vi;
        }
    }
    let mu = r.iter().sum::<f64>() / d as f64;
    let var = r.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / d as f64;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    let xhat: Vec<f64> = r.iter().map(|x| (x - mu) * inv_std).collect();
    let y: Vec<f64> = (0..d)
        .map(|j| p.t(idx::LN_GAIN)[j] * xhat[j] + p.t(idx::LN_BIAS)[j])
        .collect();
    finite("layer norm", &y)?;
    Ok(AttendParts {
        tokens,
        q,
        keys,
        values,
        alpha,
        xhat,
        inv_std,
        y,
    })
}

pub fn forward_trace(sample: &FusionSample, params: &FusionParams) -> Result<Trace, FusionError> {
    check_sample(params, &sample.h)?;
    finite("input", &sample.h)?;
    finite("input", &sample.s)?;
    finite("input", &sample.v)?;
    let (a1, gamma_beta, hm) = film_parts(&sample.h, &sample.s, params);
    finite("film", &hm)?;
    let at = attend_parts(&hm, &sample.v, params)?;
    let z = matvec(params.t(idx::WC), &at.y);
    let logits: [f64; NUM_CLASSES] = std::array::from_fn(|c| z[c] + params.t(idx::BC)[c]);
    finite("classifier", &logits)?;
    Ok(Trace {
        a1,
        gamma_beta,
        hm,
        tokens: at.tokens,
        q: at.q,
        keys: at.keys,
        values: at.values,
        alpha: at.alpha,
        xhat: at.xhat,
        inv_std: at.inv_std,
        y: at.y,
        logits,
    })
}

pub fn forward(sample: &FusionSample, params: &FusionParams) -> Result<ProbabilityDistribution, FusionError> {
    let t = forward_trace(sample, params)?;
    Ok(ProbabilityDistribution::new(crate::prior::softmax(&t.logits)))
}

pub fn smoothed_target(label: u8, smoothing: f64) -> [f64; NUM_CLASSES] {
    let off = smoothing / (NUM_CLASSES - 1) as f64;
    std::array::from_fn(|c| if c == label as usize { 1.0 - smoothing } else { off })
}

/// Cross-entropy of `p` against the smoothed one-hot target.
pub fn loss(p: &[f64; NUM_CLASSES], label: u8, smoothing: f64) -> f64 {
    let t = smoothed_target(label, smoothing);
    -t.iter().zip(p).filter(|(ti, _)| **ti > 0.0).map(|(ti, pi)| ti * pi.ln()).sum::<f64>()
}

fn log_softmax(z: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.map(|v| v - lse)
}

fn label_of(sample: &FusionSample) -> Result<u8, FusionError> {
    let l = sample.label.ok_or_else(|| FusionError::Unlabelled(sample.pair_id.clone()))?;
    if l as usize >= NUM_CLASSES {
        return Err(FusionError::BadLabel(l));
    }
    Ok(l)
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradient(sample: &FusionSample, params: &FusionParams, smoothing: f64) -> Result<(f64, Vec<Vec<f64>>), FusionError> {
    let label = label_of(sample)?;
    let tr = forward_trace(sample, params)?;
    let (d, dk) = (params.d, params.d_k);
    let mut g: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();

    let logp = log_softmax(&tr.logits);
    let target = smoothed_target(label, smoothing);
    let loss: f64 = -target.iter().zip(&logp).map(|(t, l)| t * l).sum::<f64>();
    let dlogits: Vec<f64> = (0..NUM_CLASSES).map(|c| logp[c].exp() - target[c]).collect();

    // classifier
    outer_add(&mut g[idx::WC], &dlogits, &tr.y);
    g[idx::BC].copy_from_slice(&dlogits);
    let mut dy = vec![0.0; d];
    matvec_t_add(params.t(idx::WC), &dlogits, &mut dy);

    // layer norm
    let gain = params.t(idx::LN_GAIN);
    let mut dxhat = vec![0.0; d];
    for j in 0..d {
        g[idx::LN_GAIN][j] = dy[j] * tr.xhat[j];
        g[idx::LN_BIAS][j] = dy[j];
        dxhat[j] = dy[j] * gain[j];
    }
    let mean_dx = dxhat.iter().sum::<f64>() / d as f64;
    let mean_dx_xhat = dxhat.iter().zip(&tr.xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
    let dr: Vec<f64> = (0..d)
        .map(|j| tr.inv_std * (dxhat[j] - mean_dx - tr.xhat[j] * mean_dx_xhat))
        .collect();

    // attention
    let mut dhm = dr.clone();
    let scale = (dk as f64).sqrt();
    let dalpha: Vec<f64> = tr.values.iter().map(|v| v.iter().zip(&dr).map(|(a, b)| a * b).sum()).collect();
    let weighted: f64 = tr.alpha.iter().zip(&dalpha).map(|(a, b)| a * b).sum();
    let mut dq = vec![0.0; dk];
    let mut dtokens = vec![vec![0.0; dk]; STRUCTURAL_DIM];
    for i in 0..STRUCTURAL_DIM {
        let dscore = tr.alpha[i] * (dalpha[i] - weighted) / scale;
        let dv: Vec<f64> = dr.iter().map(|x| tr.alpha[i] * x).collect();
        outer_add(&mut g[idx::WV], &dv, &tr.tokens[i]);
        matvec_t_add(params.t(idx::WV), &dv, &mut dtokens[i]);
        for (dqj, kj) in dq.iter_mut().zip(&tr.keys[i]) {
            *dqj += dscore * kj;
        }
        let dk_i: Vec<f64> = tr.q.iter().map(|qj| dscore * qj).collect();
        outer_add(&mut g[idx::WK], &dk_i, &tr.tokens[i]);
        matvec_t_add(params.t(idx::WK), &dk_i, &mut dtokens[i]);
    }
    outer_add(&mut g[idx::WQ], &dq, &tr.hm);
    matvec_t_add(params.t(idx::WQ), &dq, &mut dhm);
    for i in 0..STRUCTURAL_DIM {
        for j in 0..dk {
            g[idx::EMBED][i * dk + j] = dtokens[i][j] * sample.v[i];
            g[idx::POS][i * dk + j] = dtokens[i][j];
        }
    }

    // film
    let mut dgb = vec![0.0; 2 * d];
    for j in 0..d {
        dgb[j] = dhm[j] * sample.h[j];
        dgb[d + j] = dhm[j];
    }
    outer_add(&mut g[idx::W2], &dgb, &tr.a1);
    g[idx::B2].copy_from_slice(&dgb);
    let mut da1 = vec![0.0; params.hidden];
    matvec_t_add(params.t(idx::W2), &dgb, &mut da1);
    let dz1: Vec<f64> = da1.iter().zip(&tr.a1).map(|(d, a)| d * (1.0 - a * a)).collect();
    outer_add(&mut g[idx::W1], &dz1, &sample.s);
    g[idx::B1].copy_from_slice(&dz1);

    Ok((loss, g))
}

/// Mean loss and gradients over a batch. Per-sample gradients may be
/// computed in parallel; they are reduced in batch order.
pub fn batch_gradient(batch: &[&FusionSample], params: &FusionParams, smoothing: f64) -> Result<(Vec<f64>, Vec<Vec<f64>>), FusionError> {
    let per: Vec<(f64, Vec<Vec<f64>>)> = batch
        .par_iter()
        .map(|s| sample_gradient(s, params, smoothing))
        .collect::<Result<_, _>>()?;
    let mut total: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
    let mut losses = Vec::with_capacity(per.len());
    let inv = 1.0 / batch.len() as f64;
    for (l, g) in per {
        losses.push(l);
        for (acc, gi) in total.iter_mut().zip(g) {
            for (a, x) in acc.iter_mut().zip(gi) {
                *a += x * inv;
            }
        }
    }
    Ok((losses, total))
}

/// Mean batch loss without gradients.
pub fn batch_loss(batch: &[&FusionSample], params: &FusionParams, smoothing: f64) -> Result<f64, FusionError> {
    let mut total = 0.0;
    for s in batch {
        let tr = forward_trace(s, params)?;
        let lp = log_softmax(&tr.logits);
        let t = smoothed_target(label_of(s)?, smoothing);
        total -= t.iter().zip(&lp).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

/// AdamW moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: usize,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &FusionParams) -> Self {
        let z: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self {
            step: 0,
            m: z.clone(),
            v: z,
        }
    }
}

/// Learning rate at 1-based `step`: linear warmup to the peak, then linear
/// decay that stays positive through `total`.
pub fn scheduled_lr(cfg: &FusionConfig, step: usize, total: usize) -> f64 {
    let w = cfg.warmup_steps;
    if w > 0 && step <= w {
        cfg.learning_rate * step as f64 / w as f64
    } else if total <= w {
        cfg.learning_rate
    } else {
        cfg.learning_rate * (total + 1 - step.min(total)) as f64 / (total + 1 - w) as f64
    }
}

/// One AdamW update with decoupled weight decay on matrices.
pub fn adamw_step(params: &mut FusionParams, state: &mut AdamState, grads: &[Vec<f64>], lr: f64, cfg: &FusionConfig) -> Result<(), FusionError> {
    for (i, g) in grads.iter().enumerate() {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(FusionError::NonFiniteGradient(TENSOR_NAMES[i]));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, tensor) in params.tensors.iter_mut().enumerate() {
        let decay = if DECAYED[i] { cfg.weight_decay } else { 0.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, w) in tensor.data.iter_mut().enumerate() {
            let gk = grads[i][k];
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let update = (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.adam_eps);
            *w -= lr * (update + decay * *w);
        }
    }
    Ok(())
}

/// Optimizer steps for streamed batching: `ceil(epochs · n / batch)`.
pub fn total_steps(n: usize, epochs: usize, batch: usize) -> usize {
    (epochs * n).div_ceil(batch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    /// mean loss of this epoch's samples, measured before their update
    pub loss: f64,
    pub train_accuracy: f64,
    pub val_macro_f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: FusionParams,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

/// Predicts every sample (order-preserving, parallel).
pub fn predict_all(samples: &[FusionSample], params: &FusionParams) -> Result<Vec<ProbabilityDistribution>, FusionError> {
    samples.par_iter().map(|s| forward(s, params)).collect()
}

fn macro_f1_of(samples: &[FusionSample], params: &FusionParams) -> Result<(f64, f64), FusionError> {
    let preds = predict_all(samples, params)?;
    let truths: Vec<u8> = samples.iter().map(label_of).collect::<Result<_, _>>()?;
    let labels: Vec<u8> = preds.iter().map(|p| p.label()).collect();
    let c = crate::metrics::confusion_and_prf(&truths, &labels).expect("labels validated");
    Ok((c.macro_avg.f1, c.accuracy))
}

/// Trains the head. Samples are visited in a per-epoch seeded permutation;
/// the permutations are concatenated and cut into consecutive batches, so a
/// batch may straddle an epoch boundary. `on_epoch` runs after the batch
/// that completes each epoch.
pub fn train<F>(
    train_set: &[FusionSample],
    validation: &[FusionSample],
    cfg: &FusionConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome, FusionError>
where
    F: FnMut(&EpochLog, &FusionParams) -> Result<(), FusionError>,
{
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(FusionError::EmptyDataset);
    }
    let labels: Vec<u8> = train_set.iter().map(label_of).collect::<Result<_, _>>()?;
    let d = train_set[0].h.len();
    let mut params = FusionParams::init(d, cfg.d_k, cfg.hidden, log_class_prior(labels.iter().copied()), cfg.seed);
    let mut state = AdamState::new(&params);
    let n = train_set.len();
    let total = total_steps(n, cfg.epochs, cfg.batch_size);

    let order: Vec<usize> = (0..cfg.epochs)
        .flat_map(|e| {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut stream_rng(cfg.seed, 1000 + e as u64));
            perm
        })
        .collect();

    let mut steps = Vec::with_capacity(total);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let (mut epoch_loss, mut epoch_hits, mut seen) = (0.0, 0usize, 0usize);
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let batch: Vec<&FusionSample> = chunk.iter().map(|&i| &train_set[i]).collect();
        let (losses, grads) = batch_gradient(&batch, &params, cfg.label_smoothing)?;
        let hits = chunk
            .par_iter()
            .map(|&i| forward(&train_set[i], &params).map(|p| p.label() == labels[i]))
            .collect::<Result<Vec<bool>, _>>()?;
        let step = b + 1;
        let lr = scheduled_lr(cfg, step, total);
        adamw_step(&mut params, &mut state, &grads, lr, cfg)?;
        steps.push(StepLog {
            step,
            loss: losses.iter().sum::<f64>() / losses.len() as f64,
            lr,
        });
        let mut finished: Vec<(usize, f64, usize)> = Vec::new();
        for (k, (l, h)) in losses.iter().zip(hits).enumerate() {
            epoch_loss += l;
            epoch_hits += usize::from(h);
            seen += 1;
            if seen == n {
                finished.push(((b * cfg.batch_size + k) / n, epoch_loss, epoch_hits));
                epoch_loss = 0.0;
                epoch_hits = 0;
                seen = 0;
            }
        }
        for (epoch, loss_sum, hits) in finished {
            let val_macro_f1 = if validation.is_empty() {
                None
            } else {
                Some(macro_f1_of(validation, &params)?.0)
            };
            let log = EpochLog {
                epoch: epoch + 1,
                step,
                loss: loss_sum / n as f64,
                train_accuracy: hits as f64 / n as f64,
                val_macro_f1,
            };
            on_epoch(&log, &params)?;
            epochs.push(log);
        }
    }
    Ok(TrainOutcome { params, steps, epochs })
}

// ---- checkpoint ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// byte offset from the start of the blob section
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    d: usize,
    d_k: usize,
    hidden: usize,
    seed: u64,
    step: usize,
    tensors: Vec<TensorEntry>,
}

/// `"TFCK" | u32 version | u32 header_len | JSON header | f32 LE blobs |
/// u32 crc32` where the checksum covers every preceding byte.
pub fn encode_checkpoint(params: &FusionParams, step: usize) -> Vec<u8> {
    let mut offset = 0;
    let tensors = params
        .tensors
        .iter()
        .zip(TENSOR_NAMES)
        .map(|(t, name)| {
            let e = TensorEntry {
                name: name.to_string(),
                shape: t.shape.clone(),
                offset,
            };
            offset += 4 * t.data.len();
            e
        })
        .collect();
    let header = serde_json::to_vec(&CheckpointHeader {
        d: params.d,
        d_k: params.d_k,
        hidden: params.hidden,
        seed: params.seed,
        step,
        tensors,
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(12 + header.len() + offset);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for t in &params.tensors {
        for &x in &t.data {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Parses a checkpoint; returns the parameters and the step it was taken at.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(FusionParams, usize), FusionError> {
    let bad = |m: String| FusionError::Checkpoint(m);
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let (bytes, trailer) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(bytes) != u32::from_le_bytes(trailer.try_into().unwrap()) {
        return Err(bad("checksum mismatch".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_bytes = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(header_bytes).map_err(|e| bad(e.to_string()))?;
    let expected = shapes(header.d, header.d_k, header.hidden);
    if header.tensors.len() != expected.len() {
        return Err(bad(format!("expected {} tensors, found {}", expected.len(), header.tensors.len())));
    }
    let blob = &bytes[12 + hlen..];
    let mut params = FusionParams::zeros(header.d, header.d_k, header.hidden);
    params.seed = header.seed;
    for (i, entry) in header.tensors.iter().enumerate() {
        if entry.name != TENSOR_NAMES[i] || entry.shape != expected[i] {
            return Err(bad(format!("tensor {i} is {} {:?}", entry.name, entry.shape)));
        }
        let len = expected[i].iter().product::<usize>();
        let raw = blob
            .get(entry.offset..entry.offset + 4 * len)
            .ok_or_else(|| bad(format!("tensor {} truncated", entry.name)))?;
        params.tensors[i].data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
    }
    if !params.is_finite() {
        return Err(bad("non-finite parameter".into()));
    }
    Ok((params, header.step))
}

pub fn save_checkpoint(path: &Path, params: &FusionParams, step: usize) -> Result<(), FusionError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::File::create(path)?.write_all(&encode_checkpoint(params, step))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(FusionParams, usize), FusionError> {
    decode_checkpoint(&std::fs::read(path)?)
}
