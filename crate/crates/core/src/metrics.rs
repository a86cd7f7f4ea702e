//! Evaluation: confusion matrices, per-class and averaged P/R/F1, Top-k
//! coverage, percentile bootstrap intervals, confidence-binned tables and
//! policy comparisons.
//!
//! Conventions: a ratio with a zero denominator is 0; macro averages always
//! divide by [`NUM_CLASSES`], absent classes included; ranking ties go to the
//! lower label index.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::stream_rng;
use crate::NUM_CLASSES;

pub const DEFAULT_BOOTSTRAP_RESAMPLES: usize = 1000;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} truths vs {1} predictions")]
    LengthMismatch(usize, usize),
    #[error("label {0} outside 0..=6")]
    BadLabel(u8),
    #[error("k = {0} outside 1..=7")]
    BadK(usize),
    #[error("bootstrap needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("bin edges must be strictly increasing from 0 to 1: {0:?}")]
    BadEdges(Vec<f64>),
    #[error("pair id sets differ: {0}")]
    PairMismatch(String),
}

pub type Confusion = [[u64; NUM_CLASSES]; NUM_CLASSES];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    /// rows = truth, columns = prediction
    pub confusion: Confusion,
    pub per_class: Vec<ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: Averages,
    pub weighted: Averages,
    pub accuracy: f64,
    pub n: u64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn check_labels(labels: &[u8]) -> Result<(), MetricsError> {
    match labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        Some(&l) => Err(MetricsError::BadLabel(l)),
        None => Ok(()),
    }
}

pub fn confusion_matrix(truths: &[u8], preds: &[u8]) -> Result<Confusion, MetricsError> {
    if truths.len() != preds.len() {
        return Err(MetricsError::LengthMismatch(truths.len(), preds.len()));
    }
    check_labels(truths)?;
    check_labels(preds)?;
    let mut m = [[0u64; NUM_CLASSES]; NUM_CLASSES];
    for (&t, &p) in truths.iter().zip(preds) {
        m[t as usize][p as usize] += 1;
    }
    Ok(m)
}

pub fn classification_from_confusion(confusion: &Confusion) -> Classification {
    let n: u64 = confusion.iter().flatten().sum();
    let mut per_class = Vec::with_capacity(NUM_CLASSES);
    for c in 0..NUM_CLASSES {
        let tp = confusion[c][c] as f64;
        let support: u64 = confusion[c].iter().sum();
        let predicted: u64 = (0..NUM_CLASSES).map(|r| confusion[r][c]).sum();
        let precision = ratio(tp, predicted as f64);
        let recall = ratio(tp, support as f64);
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1: ratio(2.0 * precision * recall, precision + recall),
            support,
        });
    }
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / NUM_CLASSES as f64;
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        ratio(per_class.iter().map(|m| f(m) * m.support as f64).sum(), n as f64)
    };
    let diag: u64 = (0..NUM_CLASSES).map(|c| confusion[c][c]).sum();
    Classification {
        confusion: *confusion,
        macro_avg: Averages {
            precision: mean(|m| m.precision),
            recall: mean(|m| m.recall),
            f1: mean(|m| m.f1),
        },
        weighted: Averages {
            precision: weighted(|m| m.precision),
            recall: weighted(|m| m.recall),
            f1: weighted(|m| m.f1),
        },
        accuracy: ratio(diag as f64, n as f64),
        per_class,
        n,
    }
}

pub fn confusion_and_prf(truths: &[u8], preds: &[u8]) -> Result<Classification, MetricsError> {
    Ok(classification_from_confusion(&confusion_matrix(truths, preds)?))
}

/// Label indices ordered by descending probability, ties to the lower index.
pub fn rank_labels(p: &[f64; NUM_CLASSES]) -> [usize; NUM_CLASSES] {
    let mut order: [usize; NUM_CLASSES] = std::array::from_fn(|i| i);
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    order
}

pub fn argmax(p: &[f64; NUM_CLASSES]) -> usize {
    rank_labels(p)[0]
}

/// Fraction of samples whose truth is among the `k` top-ranked labels.
pub fn topk_coverage(truths: &[u8], distributions: &[[f64; NUM_CLASSES]], k: usize) -> Result<f64, MetricsError> {
    if !(1..=NUM_CLASSES).contains(&k) {
        return Err(MetricsError::BadK(k));
    }
    if truths.len() != distributions.len() {
        return Err(MetricsError::LengthMismatch(truths.len(), distributions.len()));
    }
    check_labels(truths)?;
    let hits = truths
        .iter()
        .zip(distributions)
        .filter(|(&t, p)| rank_labels(p)[..k].contains(&(t as usize)))
        .count();
    Ok(ratio(hits as f64, truths.len() as f64))
}

/// Linear-interpolation percentile of an ascending slice, `q` in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// 95% percentile-bootstrap interval of Macro-F1. Resample `r` draws from
/// its own RNG stream, so the result is independent of thread count.
pub fn bootstrap_ci(truths: &[u8], preds: &[u8], resamples: usize, seed: u64) -> Result<(f64, f64), MetricsError> {
    confusion_matrix(truths, preds)?;
    let n = truths.len();
    if n < 2 {
        return Err(MetricsError::TooFewSamples(n));
    }
    let mut scores: Vec<f64> = (0..resamples.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, r as u64);
            let mut m = [[0u64; NUM_CLASSES]; NUM_CLASSES];
            for _ in 0..n {
                let i = rng.random_range(0..n);
                m[truths[i] as usize][preds[i] as usize] += 1;
            }
            classification_from_confusion(&m).macro_avg.f1
        })
        .collect();
    scores.sort_by(f64::total_cmp);
    Ok((percentile(&scores, 0.025), percentile(&scores, 0.975)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBin {
    pub low: f64,
    pub high: f64,
    pub count: u64,
    /// `None` for an empty bin.
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub weighted_f1: Option<f64>,
}

pub fn validate_edges(edges: &[f64]) -> Result<(), MetricsError> {
    let ok = edges.len() >= 2
        && edges[0] == 0.0
        && edges[edges.len() - 1] == 1.0
        && edges.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(MetricsError::BadEdges(edges.to_vec()))
    }
}

/// Bins are `[e_i, e_{i+1})` except the last, which is closed.
pub fn bin_index(edges: &[f64], confidence: f64) -> usize {
    let last = edges.len() - 2;
    (0..=last)
        .find(|&i| confidence < edges[i + 1])
        .unwrap_or(last)
}

pub fn confidence_bin_report(
    truths: &[u8],
    preds: &[u8],
    confidences: &[f64],
    edges: &[f64],
) -> Result<Vec<ConfidenceBin>, MetricsError> {
    validate_edges(edges)?;
    confusion_matrix(truths, preds)?;
    if confidences.len() != truths.len() {
        return Err(MetricsError::LengthMismatch(truths.len(), confidences.len()));
    }
    let nbins = edges.len() - 1;
    let mut mats = vec![[[0u64; NUM_CLASSES]; NUM_CLASSES]; nbins];
    for ((&t, &p), &c) in truths.iter().zip(preds).zip(confidences) {
        mats[bin_index(edges, c)][t as usize][p as usize] += 1;
    }
    Ok(mats
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let c = classification_from_confusion(m);
            let nonempty = c.n > 0;
            ConfidenceBin {
                low: edges[i],
                high: edges[i + 1],
                count: c.n,
                accuracy: nonempty.then_some(c.accuracy),
                macro_f1: nonempty.then_some(c.macro_avg.f1),
                weighted_f1: nonempty.then_some(c.weighted.f1),
            }
        })
        .collect())
}

/// The Table-style row of one prediction run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RunSummary {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
}

impl RunSummary {
    pub fn of(c: &Classification) -> Self {
        Self {
            accuracy: c.accuracy,
            macro_precision: c.macro_avg.precision,
            macro_recall: c.macro_avg.recall,
            macro_f1: c.macro_avg.f1,
            weighted_precision: c.weighted.precision,
            weighted_recall: c.weighted.recall,
            weighted_f1: c.weighted.f1,
        }
    }

    pub fn minus(&self, base: &Self) -> Self {
        Self {
            accuracy: self.accuracy - base.accuracy,
            macro_precision: self.macro_precision - base.macro_precision,
            macro_recall: self.macro_recall - base.macro_recall,
            macro_f1: self.macro_f1 - base.macro_f1,
            weighted_precision: self.weighted_precision - base.weighted_precision,
            weighted_recall: self.weighted_recall - base.weighted_recall,
            weighted_f1: self.weighted_f1 - base.weighted_f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyComparison {
    pub base: RunSummary,
    pub arbitrated: RunSummary,
    /// arbitrated − base
    pub delta: RunSummary,
}

/// Compares two labelings of the same pair set against ground truth.
pub fn compare_policies(
    truths: &BTreeMap<String, u8>,
    base: &BTreeMap<String, u8>,
    arbitrated: &BTreeMap<String, u8>,
) -> Result<PolicyComparison, MetricsError> {
    if base.len() != arbitrated.len() || base.keys().zip(arbitrated.keys()).any(|(a, b)| a != b) {
        return Err(MetricsError::PairMismatch("base and arbitrated runs".into()));
    }
    let mut t = Vec::with_capacity(base.len());
    for id in base.keys() {
        t.push(*truths
            .get(id)
            .ok_or_else(|| MetricsError::PairMismatch(format!("no truth for {id}")))?);
    }
    let b: Vec<u8> = base.values().copied().collect();
    let a: Vec<u8> = arbitrated.values().copied().collect();
    let base = RunSummary::of(&confusion_and_prf(&t, &b)?);
    let arbitrated = RunSummary::of(&confusion_and_prf(&t, &a)?);
    Ok(PolicyComparison {
        delta: arbitrated.minus(&base),
        base,
        arbitrated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: u64,
    pub confusion: Confusion,
    pub per_class: BTreeMap<String, ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: Averages,
    pub weighted: Averages,
    pub accuracy: f64,
    /// k -> coverage; present only when distributions were supplied.
    pub topk_coverage: BTreeMap<String, f64>,
    pub ci_95: Option<(f64, f64)>,
    pub confidence_bins: Vec<ConfidenceBin>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy_comparison: Option<PolicyComparison>,
}

pub struct EvalInput<'a> {
    pub truths: &'a [u8],
    pub preds: &'a [u8],
    pub confidences: &'a [f64],
    pub distributions: Option<&'a [[f64; NUM_CLASSES]]>,
    pub bin_edges: &'a [f64],
    pub resamples: usize,
    pub seed: u64,
}

pub fn build_report(input: &EvalInput<'_>) -> Result<EvalReport, MetricsError> {
    let c = confusion_and_prf(input.truths, input.preds)?;
    let mut topk = BTreeMap::new();
    if let Some(d) = input.distributions {
        for k in 1..=NUM_CLASSES {
            topk.insert(k.to_string(), topk_coverage(input.truths, d, k)?);
        }
    }
    let ci_95 = if input.truths.len() >= 2 {
        Some(bootstrap_ci(input.truths, input.preds, input.resamples, input.seed)?)
    } else {
        None
    };
    Ok(EvalReport {
        n: c.n,
        confusion: c.confusion,
        per_class: c.per_class.iter().enumerate().map(|(i, m)| (i.to_string(), *m)).collect(),
        macro_avg: c.macro_avg,
        weighted: c.weighted,
        accuracy: c.accuracy,
        topk_coverage: topk,
        ci_95,
        confidence_bins: confidence_bin_report(input.truths, input.preds, input.confidences, input.bin_edges)?,
        policy_comparison: None,
    })
}

/// Confusion matrix as CSV with a header row of predicted labels.
pub fn confusion_csv(m: &Confusion) -> String {
    let mut out = String::from("truth\\pred");
    for c in 0..NUM_CLASSES {
        out.push_str(&format!(",{c}"));
    }
    out.push('\n');
    for (r, row) in m.iter().enumerate() {
        out.push_str(&r.to_string());
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn four_sample_hand_case() {
        let c = confusion_and_prf(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        assert_eq!(c.confusion[0][0], 1);
        assert_eq!(c.confusion[0][1], 1);
        assert_eq!(c.confusion[1][1], 2);
        let (p0, p1) = (c.per_class[0], c.per_class[1]);
        assert_abs_diff_eq!(p0.precision, 1.0);
        assert_abs_diff_eq!(p0.recall, 0.5);
        assert_abs_diff_eq!(p0.f1, 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p1.precision, 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p1.recall, 1.0);
        assert_abs_diff_eq!(p1.f1, 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(c.macro_avg.f1, (2.0 / 3.0 + 0.8) / 7.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.accuracy, 0.75);
        assert_abs_diff_eq!(c.weighted.f1, (2.0 / 3.0 * 2.0 + 0.8 * 2.0) / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn perfect_predictions() {
        let t: Vec<u8> = (0..7).collect();
        let c = confusion_and_prf(&t, &t).unwrap();
        assert_eq!(c.macro_avg.f1, 1.0);
        for i in 0..7 {
            assert_eq!(c.confusion[i][i], 1);
        }
        // every resample must cover all seven classes for the macro mean to stay at 1
        let many: Vec<u8> = (0..700).map(|i| (i % 7) as u8).collect();
        assert_eq!(bootstrap_ci(&many, &many, 200, 5).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn errors() {
        assert_eq!(confusion_and_prf(&[0], &[0, 1]), Err(MetricsError::LengthMismatch(1, 2)));
        assert_eq!(confusion_and_prf(&[9], &[0]), Err(MetricsError::BadLabel(9)));
        assert_eq!(bootstrap_ci(&[0], &[0], 10, 1), Err(MetricsError::TooFewSamples(1)));
        assert!(topk_coverage(&[0], &[[1.0 / 7.0; 7]], 0).is_err());
        assert!(validate_edges(&[0.0, 0.6, 0.6, 1.0]).is_err());
        assert!(validate_edges(&[0.1, 1.0]).is_err());
    }

    #[test]
    fn topk_examples() {
        let p = [0.5, 0.3, 0.1, 0.05, 0.03, 0.01, 0.01];
        assert_eq!(topk_coverage(&[2], &[p], 3).unwrap(), 1.0);
        assert_eq!(topk_coverage(&[2], &[p], 2).unwrap(), 0.0);
        assert_eq!(topk_coverage(&[6], &[p], 7).unwrap(), 1.0);
        // ties resolve toward lower labels: 5 ranks ahead of 6
        assert_eq!(rank_labels(&p)[5..], [5, 6]);
        assert_eq!(argmax(&[0.2, 0.2, 0.2, 0.1, 0.1, 0.1, 0.1]), 0);
    }

    #[test]
    fn bootstrap_is_seeded() {
        let t: Vec<u8> = (0..200).map(|i| (i % 7) as u8).collect();
        let p: Vec<u8> = t.iter().enumerate().map(|(i, &l)| if i % 5 == 0 { (l + 1) % 7 } else { l }).collect();
        let a = bootstrap_ci(&t, &p, 300, 11).unwrap();
        assert_eq!(a, bootstrap_ci(&t, &p, 300, 11).unwrap());
        assert!(a.0 < a.1);
    }

    #[test]
    fn percentile_interpolates() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 0.5), 2.0);
        assert_abs_diff_eq!(percentile(&v, 0.1), 0.4, epsilon = 1e-12);
    }

    #[test]
    fn bins_half_open_last_closed() {
        let e = [0.0, 0.6, 1.0];
        assert_eq!(bin_index(&e, 0.0), 0);
        assert_eq!(bin_index(&e, 0.599), 0);
        assert_eq!(bin_index(&e, 0.6), 1);
        assert_eq!(bin_index(&e, 1.0), 1);
        let bins = confidence_bin_report(&[1, 2], &[1, 2], &[0.95, 0.95], &e).unwrap();
        assert_eq!(bins[0].count, 0);
        assert_eq!(bins[0].accuracy, None);
        assert_eq!(bins[1].count, 2);
        assert_eq!(bins[1].accuracy, Some(1.0));
    }

    #[test]
    fn policy_deltas() {
        let ids: Vec<String> = (0..4).map(|i| format!("p{i}")).collect();
        let map = |v: [u8; 4]| ids.iter().cloned().zip(v).collect::<BTreeMap<_, _>>();
        let truth = map([0, 1, 2, 3]);
        let base = map([0, 1, 2, 0]);
        let same = compare_policies(&truth, &base, &base).unwrap();
        assert_eq!(same.delta, RunSummary::default());
        let fixed = compare_policies(&truth, &base, &truth).unwrap();
        assert_abs_diff_eq!(fixed.delta.accuracy, 0.25, epsilon = 1e-12);
        let mut other = base.clone();
        other.remove("p0");
        assert!(compare_policies(&truth, &base, &other).is_err());
    }

    #[test]
    fn csv_shape() {
        let m = confusion_matrix(&[0, 6], &[0, 5]).unwrap();
        let csv = confusion_csv(&m);
        assert_eq!(csv.lines().count(), 8);
        assert_eq!(csv.lines().last().unwrap(), "6,0,0,0,0,0,1,0");
    }
}
