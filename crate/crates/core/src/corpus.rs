//! Corpus curation: length filtering, normalized-hash deduplication,
//! project-isolated splits, capped/stratified sampling and greedy
//! diversity selection for the weak-Type-3/Type-4 class.
//!
//! Every stage is a pure function of its inputs and the [`SplitPlan`]
//! seed. Parallel work (tokenizing candidates) is collected in input order,
//! so results never depend on the worker count.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::lexical::tokenize;
use crate::NUM_CLASSES;

pub const DEFAULT_MIN_CHARS: usize = 200;
pub const DEFAULT_TRAIN_CAP_NON_CLONE: usize = 40_000;
pub const DEFAULT_TRAIN_CAP_WEAK: usize = 25_000;
pub const DEFAULT_VALIDATION_TARGET: usize = 1_428;
pub const DEFAULT_DIVERSITY_BINS: usize = 4;

/// Tokens counted by the curation-time complexity proxy.
pub const CONTROL_FLOW_TOKENS: [&str; 5] = ["if", "for", "while", "switch", "catch"];

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("fragment store line {line}{}: source is not valid UTF-8", fragment_id.as_deref().map(|id| format!(" (fragment {id})")).unwrap_or_default())]
    InvalidUtf8 {
        line: usize,
        fragment_id: Option<String>,
    },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
    #[error("pair {pair_id}: {message}")]
    InvalidPair { pair_id: String, message: String },
    #[error("invalid split plan: {0}")]
    InvalidPlan(String),
    #[error("project set is empty")]
    NoProjects,
    #[error("diversity budget {budget} exceeds {available} candidates")]
    BudgetTooLarge { budget: usize, available: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Jsonl(#[from] crate::jsonl::JsonlError),
}

/// A source function with its project provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeFragment {
    pub fragment_id: String,
    pub project_id: String,
    pub source_text: String,
    pub char_length: usize,
    /// Hex SHA-256 of [`normalize_for_hash`] applied to `source_text`.
    pub content_hash: String,
}

impl CodeFragment {
    pub fn new(fragment_id: impl Into<String>, project_id: impl Into<String>, source: impl Into<String>) -> Self {
        let source_text = source.into();
        let digest = Sha256::digest(normalize_for_hash(&source_text).as_bytes());
        Self {
            fragment_id: fragment_id.into(),
            project_id: project_id.into(),
            char_length: source_text.chars().count(),
            content_hash: format!("{digest:x}"),
            source_text,
        }
    }
}

/// Trims each line and collapses internal whitespace runs to one space.
pub fn normalize_for_hash(source: &str) -> String {
    source
        .lines()
        .map(|line| line.split_whitespace().collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Fragment store row: `{"fragment_id","project_id","source"}`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct FragmentRecord {
    pub fragment_id: String,
    pub project_id: String,
    pub source: String,
}

impl From<&CodeFragment> for FragmentRecord {
    fn from(f: &CodeFragment) -> Self {
        Self {
            fragment_id: f.fragment_id.clone(),
            project_id: f.project_id.clone(),
            source: f.source_text.clone(),
        }
    }
}

/// Loads a fragment store, rejecting lines that are not valid UTF-8.
pub fn load_fragments(path: &Path) -> Result<Vec<CodeFragment>, CorpusError> {
    let bytes = std::fs::read(path)?;
    let mut out = Vec::new();
    for (idx, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let line = match std::str::from_utf8(raw) {
            Ok(l) => l,
            Err(_) => {
                let lossy = String::from_utf8_lossy(raw);
                let fragment_id = serde_json::from_str::<serde_json::Value>(&lossy)
                    .ok()
                    .and_then(|v| v.get("fragment_id")?.as_str().map(str::to_string));
                return Err(CorpusError::InvalidUtf8 {
                    line: idx + 1,
                    fragment_id,
                });
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        let rec: FragmentRecord = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
            path: path.display().to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(CodeFragment::new(rec.fragment_id, rec.project_id, rec.source));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
    #[default]
    Unassigned,
}

impl Split {
    pub const ASSIGNED: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

/// One labelled fragment pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: String,
    pub left: String,
    pub right: String,
    pub label: u8,
    #[serde(default)]
    pub split: Split,
}

impl PairRecord {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.label as usize >= NUM_CLASSES {
            return Err(CorpusError::InvalidPair {
                pair_id: self.pair_id.clone(),
                message: format!("label {} outside 0..=6", self.label),
            });
        }
        if self.left == self.right {
            return Err(CorpusError::InvalidPair {
                pair_id: self.pair_id.clone(),
                message: "left and right fragments are identical".into(),
            });
        }
        Ok(())
    }
}

pub fn load_pairs(path: &Path) -> Result<Vec<PairRecord>, CorpusError> {
    let pairs: Vec<PairRecord> = crate::jsonl::read(path)?;
    for p in &pairs {
        p.validate()?;
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    /// (train, validation, test) fractions.
    pub ratios: [f64; 3],
    /// label -> maximum training pairs; absent labels are uncapped.
    pub train_caps: BTreeMap<u8, usize>,
    pub validation_target: usize,
    pub seed: u64,
}

impl SplitPlan {
    pub fn new(seed: u64) -> Self {
        Self {
            ratios: [0.7, 0.1, 0.2],
            train_caps: BTreeMap::from([(0, DEFAULT_TRAIN_CAP_NON_CLONE), (6, DEFAULT_TRAIN_CAP_WEAK)]),
            validation_target: DEFAULT_VALIDATION_TARGET,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(CorpusError::InvalidPlan(format!("ratios {:?} outside [0, 1]", self.ratios)));
        }
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CorpusError::InvalidPlan(format!("ratios sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Independent RNG stream per (seed, purpose).
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub input: usize,
    pub too_short: usize,
    pub duplicates: usize,
    pub kept: usize,
}

/// Drops fragments shorter than `min_chars` characters, then keeps the first
/// fragment of each `content_hash`. Output preserves input order.
pub fn filter_and_dedup(fragments: Vec<CodeFragment>, min_chars: usize) -> (Vec<CodeFragment>, FilterStats) {
    let mut stats = FilterStats {
        input: fragments.len(),
        ..Default::default()
    };
    let mut seen = HashSet::new();
    let mut kept = Vec::new();
    for f in fragments {
        if f.char_length < min_chars {
            stats.too_short += 1;
        } else if !seen.insert(f.content_hash.clone()) {
            stats.duplicates += 1;
        } else {
            kept.push(f);
        }
    }
    stats.kept = kept.len();
    (kept, stats)
}

/// Assigns each project to one split. Projects are ordered by
/// `SHA-256(seed ‖ project_id)` and the ordering is cut at quotas derived by
/// largest-remainder rounding of the plan ratios, so realized fractions are
/// within one project of the plan.
pub fn assign_project_splits(
    projects: &BTreeSet<String>,
    plan: &SplitPlan,
) -> Result<BTreeMap<String, Split>, CorpusError> {
    plan.validate()?;
    if projects.is_empty() {
        return Err(CorpusError::NoProjects);
    }
    let mut keyed: Vec<([u8; 32], &String)> = projects
        .iter()
        .map(|p| {
            let mut h = Sha256::new();
            h.update(plan.seed.to_le_bytes());
            h.update(p.as_bytes());
            (h.finalize().into(), p)
        })
        .collect();
    keyed.sort();

    let quotas = largest_remainder(projects.len(), &plan.ratios.map(|r| r * projects.len() as f64));
    let mut out = BTreeMap::new();
    let mut it = keyed.into_iter();
    for (split, quota) in Split::ASSIGNED.into_iter().zip(quotas) {
        for (_, p) in it.by_ref().take(quota) {
            out.insert(p.clone(), split);
        }
    }
    Ok(out)
}

/// Rounds `ideal` shares to integers summing to `total`: floors first, then
/// one extra unit each to the largest fractional parts (ties: larger ideal,
/// then lower index).
fn largest_remainder(total: usize, ideal: &[f64]) -> Vec<usize> {
    let mut counts: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..ideal.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = ideal[a] - ideal[a].floor();
        let rb = ideal[b] - ideal[b].floor();
        rb.total_cmp(&ra)
            .then(ideal[b].total_cmp(&ideal[a]))
            .then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Uniformly keeps `cap` of `indices` (without replacement), returned in
/// input order.
fn sample_indices(indices: &[usize], cap: usize, seed: u64, stream: u64) -> Vec<usize> {
    if indices.len() <= cap {
        return indices.to_vec();
    }
    let mut rng = stream_rng(seed, stream);
    let mut chosen: Vec<usize> = index::sample(&mut rng, indices.len(), cap)
        .into_iter()
        .map(|i| indices[i])
        .collect();
    chosen.sort_unstable();
    chosen
}

fn by_label(pairs: &[PairRecord]) -> [Vec<usize>; NUM_CLASSES] {
    let mut groups: [Vec<usize>; NUM_CLASSES] = Default::default();
    for (i, p) in pairs.iter().enumerate() {
        groups[p.label as usize].push(i);
    }
    groups
}

const STREAM_TRAIN: u64 = 0x100;
const STREAM_VALIDATION: u64 = 0x200;
const STREAM_DIVERSITY: u64 = 0x300;

/// Caps the labels listed in `plan.train_caps`; every other label is kept
/// whole. Output keeps input order.
pub fn sample_training_set(pairs: &[PairRecord], plan: &SplitPlan) -> Vec<PairRecord> {
    let groups = by_label(pairs);
    let mut keep = Vec::new();
    for (label, idx) in groups.iter().enumerate() {
        match plan.train_caps.get(&(label as u8)) {
            Some(&cap) => keep.extend(sample_indices(idx, cap, plan.seed, STREAM_TRAIN + label as u64)),
            None => keep.extend_from_slice(idx),
        }
    }
    keep.sort_unstable();
    keep.into_iter().map(|i| pairs[i].clone()).collect()
}

/// Downsamples every label to `plan.validation_target`; smaller labels are
/// retained in full.
pub fn sample_validation_set(pairs: &[PairRecord], plan: &SplitPlan) -> Vec<PairRecord> {
    let groups = by_label(pairs);
    let mut keep = Vec::new();
    for (label, idx) in groups.iter().enumerate() {
        keep.extend(sample_indices(
            idx,
            plan.validation_target,
            plan.seed,
            STREAM_VALIDATION + label as u64,
        ));
    }
    keep.sort_unstable();
    keep.into_iter().map(|i| pairs[i].clone()).collect()
}

/// Greedy max-min diversity: after a given first pick, repeatedly take the
/// candidate whose maximum similarity to the already selected items is
/// smallest (ties go to the lower index). Returns indices in pick order.
pub fn greedy_diverse<F>(n: usize, budget: usize, first: usize, sim: F) -> Vec<usize>
where
    F: Fn(usize, usize) -> f64,
{
    let budget = budget.min(n);
    if budget == 0 {
        return Vec::new();
    }
    let mut selected = vec![first];
    let mut taken = vec![false; n];
    taken[first] = true;
    let mut max_sim: Vec<f64> = (0..n).map(|i| if i == first { 0.0 } else { sim(i, first) }).collect();
    while selected.len() < budget {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            if best.map_or(true, |b| max_sim[i] < max_sim[b]) {
                best = Some(i);
            }
        }
        let pick = best.expect("budget <= n leaves a candidate");
        taken[pick] = true;
        selected.push(pick);
        for i in 0..n {
            if !taken[i] {
                max_sim[i] = max_sim[i].max(sim(i, pick));
            }
        }
    }
    selected
}

/// Jaccard similarity of two sorted, deduplicated id lists.
fn sorted_jaccard(a: &[u32], b: &[u32]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Quantile cut points splitting `values` into `bins` groups.
fn quantile_edges(values: &[usize], bins: usize) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    (1..bins)
        .map(|k| sorted[(k * sorted.len() / bins).min(sorted.len() - 1)])
        .collect()
}

fn bin_of(value: usize, edges: &[usize]) -> usize {
    edges.iter().filter(|&&e| value >= e).count()
}

/// Selects `budget` label-6 training pairs for diversity. Candidates are
/// binned on a `bins × bins` quantile grid of (combined code length,
/// control-flow token count); each bin receives a budget share proportional
/// to its size (largest remainder) and fills it with [`greedy_diverse`]
/// over token-set Jaccard. A pair's token set is the union of both sides'.
/// Returned pairs keep input order.
pub fn diversity_select(
    candidates: &[PairRecord],
    fragments: &HashMap<&str, &CodeFragment>,
    bins: usize,
    budget: usize,
    seed: u64,
) -> Result<Vec<PairRecord>, CorpusError> {
    if budget > candidates.len() {
        return Err(CorpusError::BudgetTooLarge {
            budget,
            available: candidates.len(),
        });
    }
    if budget == candidates.len() {
        return Ok(candidates.to_vec());
    }
    let lookup = |id: &str| -> Result<&CodeFragment, CorpusError> {
        fragments.get(id).copied().ok_or_else(|| CorpusError::InvalidPair {
            pair_id: id.to_string(),
            message: "fragment missing from store".into(),
        })
    };
    let mut sides = Vec::with_capacity(candidates.len());
    for p in candidates {
        sides.push((lookup(&p.left)?, lookup(&p.right)?));
    }
    let profiles: Vec<(BTreeSet<String>, usize, usize)> = sides
        .par_iter()
        .map(|(l, r)| {
            let mut set = BTreeSet::new();
            let mut control = 0;
            for t in tokenize(&l.source_text).tokens().iter().chain(tokenize(&r.source_text).tokens()) {
                if CONTROL_FLOW_TOKENS.contains(&t.as_str()) {
                    control += 1;
                }
                set.insert(t.clone());
            }
            (set, l.char_length + r.char_length, control)
        })
        .collect();

    let mut interner: HashMap<&str, u32> = HashMap::new();
    let token_ids: Vec<Vec<u32>> = profiles
        .iter()
        .map(|(set, _, _)| {
            let mut ids: Vec<u32> = set
                .iter()
                .map(|t| {
                    let next = interner.len() as u32;
                    *interner.entry(t.as_str()).or_insert(next)
                })
                .collect();
            ids.sort_unstable();
            ids
        })
        .collect();

    let bins = bins.max(1);
    let lengths: Vec<usize> = profiles.iter().map(|p| p.1).collect();
    let complexity: Vec<usize> = profiles.iter().map(|p| p.2).collect();
    let len_edges = quantile_edges(&lengths, bins);
    let cx_edges = quantile_edges(&complexity, bins);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); bins * bins];
    for i in 0..candidates.len() {
        members[bin_of(lengths[i], &len_edges) * bins + bin_of(complexity[i], &cx_edges)].push(i);
    }
    let ideal: Vec<f64> = members
        .iter()
        .map(|m| m.len() as f64 * budget as f64 / candidates.len() as f64)
        .collect();
    let shares = largest_remainder(budget, &ideal);

    let mut chosen = Vec::with_capacity(budget);
    for (b, (bin, &share)) in members.iter().zip(&shares).enumerate() {
        if share == 0 {
            continue;
        }
        let mut rng = stream_rng(seed, STREAM_DIVERSITY + b as u64);
        let first = index::sample(&mut rng, bin.len(), 1).index(0);
        let picks = greedy_diverse(bin.len(), share, first, |i, j| {
            sorted_jaccard(&token_ids[bin[i]], &token_ids[bin[j]])
        });
        chosen.extend(picks.into_iter().map(|i| bin[i]));
    }
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| candidates[i].clone()).collect())
}

#[derive(Debug, Clone)]
pub struct CurateOptions {
    pub min_chars: usize,
    /// Route the label-6 training cap through [`diversity_select`] instead
    /// of uniform sampling.
    pub diversity: bool,
    pub diversity_bins: usize,
}

impl Default for CurateOptions {
    fn default() -> Self {
        Self {
            min_chars: DEFAULT_MIN_CHARS,
            diversity: true,
            diversity_bins: DEFAULT_DIVERSITY_BINS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurationReport {
    pub fragments: FilterStats,
    pub projects: BTreeMap<String, usize>,
    pub pairs_input: usize,
    pub pairs_missing_fragment: usize,
    pub pairs_cross_split: usize,
    /// split -> per-label counts after sampling
    pub label_counts: BTreeMap<String, [usize; NUM_CLASSES]>,
}

#[derive(Debug, Clone)]
pub struct Curated {
    pub fragments: Vec<CodeFragment>,
    pub project_splits: BTreeMap<String, Split>,
    pub train: Vec<PairRecord>,
    pub validation: Vec<PairRecord>,
    pub test: Vec<PairRecord>,
    pub report: CurationReport,
}

fn label_counts(pairs: &[PairRecord]) -> [usize; NUM_CLASSES] {
    let mut c = [0; NUM_CLASSES];
    for p in pairs {
        c[p.label as usize] += 1;
    }
    c
}

/// Runs the full curation pipeline. Pairs touching a dropped fragment, and
/// pairs whose two projects land in different splits, are discarded and
/// counted.
pub fn curate(
    fragments: Vec<CodeFragment>,
    pairs: Vec<PairRecord>,
    plan: &SplitPlan,
    opts: &CurateOptions,
) -> Result<Curated, CorpusError> {
    plan.validate()?;
    let (kept, fstats) = filter_and_dedup(fragments, opts.min_chars);
    let by_id: HashMap<&str, &CodeFragment> = kept.iter().map(|f| (f.fragment_id.as_str(), f)).collect();
    let projects: BTreeSet<String> = kept.iter().map(|f| f.project_id.clone()).collect();
    let project_splits = assign_project_splits(&projects, plan)?;

    let mut report = CurationReport {
        fragments: fstats,
        pairs_input: pairs.len(),
        ..Default::default()
    };
    for split in Split::ASSIGNED {
        report.projects.insert(
            split.as_str().to_string(),
            project_splits.values().filter(|&&s| s == split).count(),
        );
    }

    let mut pools: BTreeMap<Split, Vec<PairRecord>> = BTreeMap::new();
    for mut pair in pairs {
        pair.validate()?;
        let (Some(l), Some(r)) = (by_id.get(pair.left.as_str()), by_id.get(pair.right.as_str())) else {
            report.pairs_missing_fragment += 1;
            continue;
        };
        let (sl, sr) = (project_splits[&l.project_id], project_splits[&r.project_id]);
        if sl != sr {
            report.pairs_cross_split += 1;
            continue;
        }
        pair.split = sl;
        pools.entry(sl).or_default().push(pair);
    }

    let train_pool = pools.remove(&Split::Train).unwrap_or_default();
    let train = if opts.diversity {
        let mut uniform_plan = plan.clone();
        let weak_cap = uniform_plan.train_caps.remove(&6);
        let (weak, rest): (Vec<_>, Vec<_>) = train_pool.into_iter().partition(|p| p.label == 6);
        let mut kept_pairs = sample_training_set(&rest, &uniform_plan);
        let budget = weak_cap.map_or(weak.len(), |c| c.min(weak.len()));
        kept_pairs.extend(diversity_select(&weak, &by_id, opts.diversity_bins, budget, plan.seed)?);
        kept_pairs
    } else {
        sample_training_set(&train_pool, plan)
    };
    let validation = sample_validation_set(&pools.remove(&Split::Validation).unwrap_or_default(), plan);
    let test = pools.remove(&Split::Test).unwrap_or_default();

    for (name, set) in [("train", &train), ("validation", &validation), ("test", &test)] {
        report.label_counts.insert(name.to_string(), label_counts(set));
    }
    Ok(Curated {
        fragments: kept,
        project_splits,
        train,
        validation,
        test,
        report,
    })
}
