//! Reference implementations used only as test oracles. They favour
//! obviousness over speed and share no code with the library.

#![allow(dead_code)]

use clonegrade::syntax::SyntaxTree;

// ---- lexical ----

/// Distinct tokens in first-seen order, by linear scan.
pub fn distinct(tokens: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for t in tokens {
        if !out.contains(t) {
            out.push(t.clone());
        }
    }
    out
}

pub fn count(tokens: &[String], t: &str) -> usize {
    tokens.iter().filter(|x| *x == t).count()
}

pub fn shared(a: &[String], b: &[String]) -> usize {
    distinct(a).iter().filter(|t| b.contains(t)).count()
}

/// (jaccard, dice, overlap, cosine); both empty -> all 1, one empty -> all 0.
pub fn set_scores(a: &[String], b: &[String]) -> (f64, f64, f64, f64) {
    if a.is_empty() && b.is_empty() {
        return (1.0, 1.0, 1.0, 1.0);
    }
    if a.is_empty() || b.is_empty() {
        return (0.0, 0.0, 0.0, 0.0);
    }
    let (ua, ub) = (distinct(a), distinct(b));
    let inter = shared(a, b) as f64;
    let mut union = ua.clone();
    for t in &ub {
        if !union.contains(t) {
            union.push(t.clone());
        }
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for t in &union {
        let (x, y) = (count(a, t) as f64, count(b, t) as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (
        inter / union.len() as f64,
        2.0 * inter / (ua.len() + ub.len()) as f64,
        inter / ua.len().min(ub.len()) as f64,
        dot / (na.sqrt() * nb.sqrt()),
    )
}

/// Full-matrix Wagner–Fischer distance.
pub fn edit_distance(a: &[String], b: &[String]) -> usize {
    let mut m = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in m.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        m[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = m[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            m[i][j] = sub.min(m[i - 1][j] + 1).min(m[i][j - 1] + 1);
        }
    }
    m[a.len()][b.len()]
}

pub fn levenshtein_norm(a: &[String], b: &[String]) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        0.0
    } else {
        edit_distance(a, b) as f64 / longest as f64
    }
}

/// Smoothed idf over `docs` by direct document scan.
pub fn idf(docs: &[Vec<String>], t: &str) -> f64 {
    let df = docs.iter().filter(|d| d.iter().any(|x| x == t)).count() as f64;
    ((1.0 + docs.len() as f64) / (1.0 + df)).ln() + 1.0
}

pub fn tfidf_cosine(a: &[String], b: &[String], docs: &[Vec<String>]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let weight = |s: &[String], t: &str| count(s, t) as f64 * idf(docs, t);
    let mut union = distinct(a);
    for t in distinct(b) {
        if !union.contains(&t) {
            union.push(t);
        }
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for t in &union {
        let (x, y) = (weight(a, t), weight(b, t));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt() * nb.sqrt())
}

// ---- tree edit distance by exhaustive mapping search ----

/// Flattened tree: labels in preorder, plus the ancestor relation.
struct Flat {
    labels: Vec<String>,
    /// anc[u][v]: u is a proper ancestor of v (preorder ids)
    anc: Vec<Vec<bool>>,
}

fn flatten(t: &SyntaxTree) -> Flat {
    let pre = t.preorder();
    let pos: std::collections::HashMap<usize, usize> = pre.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let n = pre.len();
    let mut parent = vec![None; n];
    for &id in &pre {
        for &c in &t.nodes()[id].children {
            parent[pos[&c]] = Some(pos[&id]);
        }
    }
    let mut anc = vec![vec![false; n]; n];
    for v in 0..n {
        let mut p = parent[v];
        while let Some(u) = p {
            anc[u][v] = true;
            p = parent[u];
        }
    }
    Flat {
        labels: pre.iter().map(|&id| t.kind(id).to_string()).collect(),
        anc,
    }
}

impl Flat {
    /// u precedes v without either being an ancestor of the other.
    fn left_of(&self, u: usize, v: usize) -> bool {
        u < v && !self.anc[u][v] && !self.anc[v][u]
    }
}

/// Minimum cost over every valid (Tai) mapping: one-to-one, preserving
/// ancestry and left-to-right order. Unit insert, delete and relabel.
pub fn ted_by_mappings(a: &SyntaxTree, b: &SyntaxTree) -> usize {
    let (fa, fb) = (flatten(a), flatten(b));
    let mut best = fa.labels.len() + fb.labels.len();
    let mut pairs = Vec::new();
    let mut used = vec![false; fb.labels.len()];
    search(&fa, &fb, 0, 0, &mut pairs, &mut used, &mut best);
    best
}

fn consistent(fa: &Flat, fb: &Flat, pairs: &[(usize, usize)], v: usize, w: usize) -> bool {
    pairs.iter().all(|&(v2, w2)| {
        fa.anc[v][v2] == fb.anc[w][w2] && fa.anc[v2][v] == fb.anc[w2][w] && fa.left_of(v, v2) == fb.left_of(w, w2)
            && fa.left_of(v2, v) == fb.left_of(w2, w)
    })
}

fn search(
    fa: &Flat,
    fb: &Flat,
    v: usize,
    partial: usize,
    pairs: &mut Vec<(usize, usize)>,
    used: &mut [bool],
    best: &mut usize,
) {
    let (n, m) = (fa.labels.len(), fb.labels.len());
    // every still-unmatched node of b beyond what a's remaining nodes can absorb is an insert
    let bound = partial + (m - pairs.len()).saturating_sub(n - v);
    if bound >= *best {
        return;
    }
    if v == n {
        *best = partial + (m - pairs.len());
        return;
    }
    for w in 0..m {
        if !used[w] && consistent(fa, fb, pairs, v, w) {
            used[w] = true;
            pairs.push((v, w));
            let relabel = usize::from(fa.labels[v] != fb.labels[w]);
            search(fa, fb, v + 1, partial + relabel, pairs, used, best);
            pairs.pop();
            used[w] = false;
        }
    }
    // delete v
    search(fa, fb, v + 1, partial + 1, pairs, used, best);
}

// ---- greedy diversity ----

/// Greedy trace by full recomputation: at each step score every remaining
/// candidate by its maximum similarity to the whole selected set.
pub fn greedy_trace(sim: &[Vec<f64>], budget: usize, first: usize) -> Vec<usize> {
    let mut selected = vec![first];
    while selected.len() < budget.min(sim.len()) {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..sim.len() {
            if selected.contains(&i) {
                continue;
            }
            let score = selected.iter().map(|&s| sim[i][s]).fold(f64::NEG_INFINITY, f64::max);
            if best.is_none_or(|(b, _)| score < b) {
                best = Some((score, i));
            }
        }
        selected.push(best.unwrap().1);
    }
    selected
}
