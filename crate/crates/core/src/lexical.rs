//! Token-level lexical statistics for a fragment pair.
//!
//! The tokenizer follows a small language-neutral grammar (identifiers,
//! numeric literals, quoted literals as single tokens, single-character
//! punctuation, comments removed). On top of it sit the set/multiset
//! similarities, token-level edit distance, smoothed TF-IDF cosine and the
//! 18-value feature vector that feeds the prior model.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

/// Token sequences longer than this are truncated before edit distance.
pub const LEVENSHTEIN_TOKEN_CAP: usize = 2_000;

/// Number of values in [`LexicalFeatureVector::to_array`].
pub const LEXICAL_DIM: usize = 18;

/// Fixed on-disk order of the lexical feature block.
pub const FEATURE_NAMES: [&str; LEXICAL_DIM] = [
    "jaccard",
    "dice",
    "overlap",
    "cosine",
    "levenshtein_norm",
    "tfidf_cosine",
    "unique_left",
    "unique_right",
    "total_left",
    "total_right",
    "shared",
    "sim_mean",
    "sim_std",
    "sim_max",
    "sim_min",
    "token_ratio",
    "token_diff",
    "interaction",
];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LexicalError {
    #[error("idf table has not been fitted on any document")]
    UnfittedIdf,
}

/// Ordered tokens plus their multiset view.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TokenSequence {
    tokens: Vec<String>,
    counts: BTreeMap<String, usize>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<String>) -> Self {
        let mut counts = BTreeMap::new();
        for t in &tokens {
            *counts.entry(t.clone()).or_insert(0) += 1;
        }
        Self { tokens, counts }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// token -> occurrence count; counts sum to `len()`.
    pub fn multiset(&self) -> &BTreeMap<String, usize> {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unique_count(&self) -> usize {
        self.counts.len()
    }

    pub fn token_set(&self) -> BTreeSet<&str> {
        self.counts.keys().map(String::as_str).collect()
    }
}

impl<S: Into<String>> FromIterator<S> for TokenSequence {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self::new(iter.into_iter().map(Into::into).collect())
    }
}

/// Splits source text into tokens. Comments are dropped; string and char
/// literals survive as one token each; every other non-identifier,
/// non-whitespace character is its own token.
pub fn tokenize(source: &str) -> TokenSequence {
    let chars: Vec<char> = source.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    let n = chars.len();
    while i < n {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == '/' && i + 1 < n && chars[i + 1] == '/' {
            while i < n && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        if c == '/' && i + 1 < n && chars[i + 1] == '*' {
            i += 2;
            while i < n && !(chars[i] == '*' && i + 1 < n && chars[i + 1] == '/') {
                i += 1;
            }
            i = (i + 2).min(n);
            continue;
        }
        let start = i;
        if c.is_ascii_alphabetic() || c == '_' {
            while i < n && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
        } else if c.is_ascii_digit() || (c == '.' && i + 1 < n && chars[i + 1].is_ascii_digit()) {
            i = scan_number(&chars, i);
        } else if c == '"' && i + 2 < n && chars[i + 1] == '"' && chars[i + 2] == '"' {
            // text block
            i += 3;
            while i < n && !(chars[i] == '"' && i + 2 < n && chars[i + 1] == '"' && chars[i + 2] == '"') {
                i += 1;
            }
            i = (i + 3).min(n);
        } else if c == '"' || c == '\'' {
            i = scan_quoted(&chars, i, c);
        } else {
            i += 1;
        }
        tokens.push(chars[start..i].iter().collect());
    }
    TokenSequence::new(tokens)
}

fn scan_number(chars: &[char], mut i: usize) -> usize {
    let n = chars.len();
    let hex = chars[i] == '0' && i + 1 < n && matches!(chars[i + 1], 'x' | 'X');
    if hex {
        i += 2;
    }
    while i < n {
        let c = chars[i];
        if c.is_ascii_alphanumeric() || c == '_' || c == '.' {
            i += 1;
            if !hex && matches!(c, 'e' | 'E') && i < n && matches!(chars[i], '+' | '-') {
                i += 1;
            }
        } else {
            break;
        }
    }
    i
}

/// Consumes a quoted literal; an unterminated literal ends at the line break.
fn scan_quoted(chars: &[char], mut i: usize, quote: char) -> usize {
    let n = chars.len();
    i += 1;
    while i < n {
        match chars[i] {
            '\\' => i += 2,
            '\n' => return i,
            c if c == quote => return i + 1,
            _ => i += 1,
        }
    }
    n
}

/// Jaccard, Dice and overlap over token sets; cosine over count vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetSimilarities {
    pub jaccard: f64,
    pub dice: f64,
    pub overlap: f64,
    pub cosine: f64,
}

pub fn set_similarities(a: &TokenSequence, b: &TokenSequence) -> SetSimilarities {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => {
            return SetSimilarities {
                jaccard: 1.0,
                dice: 1.0,
                overlap: 1.0,
                cosine: 1.0,
            }
        }
        (true, false) | (false, true) => {
            return SetSimilarities {
                jaccard: 0.0,
                dice: 0.0,
                overlap: 0.0,
                cosine: 0.0,
            }
        }
        _ => {}
    }
    let (sa, sb) = (a.unique_count() as f64, b.unique_count() as f64);
    let inter = shared_count(a, b) as f64;
    let union = sa + sb - inter;

    let mut dot = 0.0;
    for (tok, &ca) in a.multiset() {
        if let Some(&cb) = b.multiset().get(tok) {
            dot += (ca * cb) as f64;
        }
    }
    let norm = |s: &TokenSequence| {
        s.multiset()
            .values()
            .map(|&c| (c * c) as f64)
            .sum::<f64>()
            .sqrt()
    };
    SetSimilarities {
        jaccard: inter / union,
        dice: 2.0 * inter / (sa + sb),
        overlap: inter / sa.min(sb),
        cosine: (dot / (norm(a) * norm(b))).min(1.0),
    }
}

/// Number of distinct tokens present in both sequences.
pub fn shared_count(a: &TokenSequence, b: &TokenSequence) -> usize {
    let (small, large) = if a.unique_count() <= b.unique_count() {
        (a, b)
    } else {
        (b, a)
    };
    small
        .multiset()
        .keys()
        .filter(|t| large.multiset().contains_key(*t))
        .count()
}

/// Token edit distance divided by the longer length, with inputs truncated
/// to [`LEVENSHTEIN_TOKEN_CAP`] tokens.
pub fn levenshtein_norm(a: &TokenSequence, b: &TokenSequence) -> f64 {
    levenshtein_norm_capped(a, b, LEVENSHTEIN_TOKEN_CAP).0
}

/// Returns the normalized distance and whether either side was truncated.
pub fn levenshtein_norm_capped(a: &TokenSequence, b: &TokenSequence, cap: usize) -> (f64, bool) {
    let truncated = a.len() > cap || b.len() > cap;
    let ta = &a.tokens()[..a.len().min(cap)];
    let tb = &b.tokens()[..b.len().min(cap)];
    let longest = ta.len().max(tb.len());
    if longest == 0 {
        return (0.0, truncated);
    }
    (levenshtein(ta, tb) as f64 / longest as f64, truncated)
}

/// Unit-cost edit distance between two token slices, two-row DP.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ta) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, tb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ta != tb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Smoothed inverse document frequencies: `ln((1+N)/(1+df)) + 1`.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct IdfTable {
    pub n_docs: usize,
    pub df: BTreeMap<String, usize>,
}

impl IdfTable {
    /// Fits document frequencies over `docs`; callers pass training-split
    /// fragments only.
    pub fn fit<'a, I: IntoIterator<Item = &'a TokenSequence>>(docs: I) -> Self {
        let mut table = Self::default();
        for doc in docs {
            table.n_docs += 1;
            for tok in doc.multiset().keys() {
                *table.df.entry(tok.clone()).or_insert(0) += 1;
            }
        }
        table
    }

    pub fn is_fitted(&self) -> bool {
        self.n_docs > 0
    }

    /// Unseen tokens get `df = 0`.
    pub fn idf(&self, token: &str) -> f64 {
        let df = self.df.get(token).copied().unwrap_or(0) as f64;
        ((1.0 + self.n_docs as f64) / (1.0 + df)).ln() + 1.0
    }
}

pub fn tfidf_cosine(a: &TokenSequence, b: &TokenSequence, idf: &IdfTable) -> Result<f64, LexicalError> {
    if !idf.is_fitted() {
        return Err(LexicalError::UnfittedIdf);
    }
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    fn weights<'s>(s: &'s TokenSequence, idf: &IdfTable) -> HashMap<&'s str, f64> {
        s.multiset()
            .iter()
            .map(|(t, &c)| (t.as_str(), c as f64 * idf.idf(t)))
            .collect()
    }
    let (wa, wb) = (weights(a, idf), weights(b, idf));
    let mut dot = 0.0;
    // iterate in the BTreeMap's order so the sum is reproducible
    for tok in a.multiset().keys() {
        if let Some(vb) = wb.get(tok.as_str()) {
            dot += wa[tok.as_str()] * vb;
        }
    }
    let norm = |s: &TokenSequence, w: &HashMap<&str, f64>| {
        s.multiset()
            .keys()
            .map(|t| w[t.as_str()].powi(2))
            .sum::<f64>()
            .sqrt()
    };
    Ok((dot / (norm(a, &wa) * norm(b, &wb))).clamp(0.0, 1.0))
}

/// The 18-value lexical block. The six similarities lie in `[0, 1]`;
/// `sim_*` aggregate `{jaccard, dice, overlap, cosine, 1 - levenshtein_norm,
/// tfidf_cosine}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LexicalFeatureVector {
    pub jaccard: f64,
    pub dice: f64,
    pub overlap: f64,
    pub cosine: f64,
    pub levenshtein_norm: f64,
    pub tfidf_cosine: f64,
    pub unique_left: f64,
    pub unique_right: f64,
    pub total_left: f64,
    pub total_right: f64,
    pub shared: f64,
    pub sim_mean: f64,
    pub sim_std: f64,
    pub sim_max: f64,
    pub sim_min: f64,
    pub token_ratio: f64,
    pub token_diff: f64,
    pub interaction: f64,
}

impl LexicalFeatureVector {
    /// Values in [`FEATURE_NAMES`] order.
    pub fn to_array(&self) -> [f64; LEXICAL_DIM] {
        [
            self.jaccard,
            self.dice,
            self.overlap,
            self.cosine,
            self.levenshtein_norm,
            self.tfidf_cosine,
            self.unique_left,
            self.unique_right,
            self.total_left,
            self.total_right,
            self.shared,
            self.sim_mean,
            self.sim_std,
            self.sim_max,
            self.sim_min,
            self.token_ratio,
            self.token_diff,
            self.interaction,
        ]
    }

    pub fn from_array(v: [f64; LEXICAL_DIM]) -> Self {
        Self {
            jaccard: v[0],
            dice: v[1],
            overlap: v[2],
            cosine: v[3],
            levenshtein_norm: v[4],
            tfidf_cosine: v[5],
            unique_left: v[6],
            unique_right: v[7],
            total_left: v[8],
            total_right: v[9],
            shared: v[10],
            sim_mean: v[11],
            sim_std: v[12],
            sim_max: v[13],
            sim_min: v[14],
            token_ratio: v[15],
            token_diff: v[16],
            interaction: v[17],
        }
    }
}

/// Lexical block plus whether edit distance ran on truncated inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LexicalFeatures {
    pub vector: LexicalFeatureVector,
    pub levenshtein_truncated: bool,
}

pub fn assemble_features(
    a: &TokenSequence,
    b: &TokenSequence,
    idf: &IdfTable,
) -> Result<LexicalFeatures, LexicalError> {
    let sets = set_similarities(a, b);
    let (lev, truncated) = levenshtein_norm_capped(a, b, LEVENSHTEIN_TOKEN_CAP);
    let tfidf = tfidf_cosine(a, b, idf)?;

    let sims = [
        sets.jaccard,
        sets.dice,
        sets.overlap,
        sets.cosine,
        1.0 - lev,
        tfidf,
    ];
    let mean = sims.iter().sum::<f64>() / sims.len() as f64;
    let var = sims.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / sims.len() as f64;
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = sims.iter().copied().fold(f64::INFINITY, f64::min);

    let (tl, tr) = (a.len() as f64, b.len() as f64);
    let token_ratio = if tl.max(tr) == 0.0 {
        1.0
    } else {
        tl.min(tr) / tl.max(tr)
    };

    Ok(LexicalFeatures {
        vector: LexicalFeatureVector {
            jaccard: sets.jaccard,
            dice: sets.dice,
            overlap: sets.overlap,
            cosine: sets.cosine,
            levenshtein_norm: lev,
            tfidf_cosine: tfidf,
            unique_left: a.unique_count() as f64,
            unique_right: b.unique_count() as f64,
            total_left: tl,
            total_right: tr,
            shared: shared_count(a, b) as f64,
            // the mean of six values can drift an ulp outside [min, max]
            sim_mean: mean.clamp(min, max),
            sim_std: var.sqrt(),
            sim_max: max,
            sim_min: min,
            token_ratio,
            token_diff: (tl - tr).abs(),
            interaction: sets.cosine * (1.0 - lev),
        },
        levenshtein_truncated: truncated,
    })
}

/// Row of the lexical feature cache.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LexicalCacheRow {
    pub pair_id: String,
    pub lexical: Vec<f64>,
    #[serde(default)]
    pub levenshtein_truncated: bool,
}
