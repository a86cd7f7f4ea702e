//! Acceptance gate. Each test is one criterion and writes a single
//! `[acceptance] PASS|FAIL <name> ...` line to stderr (bypassing the test
//! harness's output capture) before asserting.

mod common;
mod oracles;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use clonegrade::arbiter::{
    decide_all, should_trigger, ArbiterError, ArbiterRunConfig, ArbitrationItem, FnArbiter, TriggerMode,
    TriggerPolicy,
};
use clonegrade::corpus::{
    curate, filter_and_dedup, greedy_diverse, CodeFragment, CurateOptions, PairRecord, Split, SplitPlan,
};
use clonegrade::fusion::{
    batch_gradient, batch_loss, film_modulate, predict_all, train, FusionConfig, FusionParams, FusionSample,
    ProbabilityDistribution, TENSOR_NAMES,
};
use clonegrade::lexical::{assemble_features, tokenize, IdfTable, TokenSequence};
use clonegrade::metrics::{
    bootstrap_ci, compare_policies, confidence_bin_report, confusion_and_prf, topk_coverage,
};
use clonegrade::syntax::{tree_edit_distance, SyntaxNode, SyntaxTree};
use clonegrade::NUM_CLASSES;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Runs `check`, reports one line, then fails the test on error, panic or
/// an exceeded time budget.
fn criterion(name: &str, budget: Option<Duration>, check: impl FnOnce() -> Result<String, String>) {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(check));
    let elapsed = start.elapsed();
    let verdict = match result {
        Ok(Ok(detail)) => match budget {
            Some(b) if elapsed > b => Err(format!("{detail}; took {elapsed:.2?}, budget {b:?}")),
            _ => Ok(detail),
        },
        Ok(Err(e)) => Err(e),
        Err(panic) => Err(panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    let (tag, detail) = match &verdict {
        Ok(d) => ("PASS", d.as_str()),
        Err(e) => ("FAIL", e.as_str()),
    };
    let _ = writeln!(std::io::stderr(), "[acceptance] {tag} {name} ({elapsed:.2?}): {detail}");
    if let Err(e) = verdict {
        panic!("{name}: {e}");
    }
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

// ---------------------------------------------------------------------------
// lexical similarity oracles

const VOCAB: [&str; 10] = ["int", "x", "i", "return", "if", "(", ")", "{", "}", ";"];

fn random_tokens(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<String> {
    let len = rng.random_range(0..=max_len);
    (0..len).map(|_| VOCAB[rng.random_range(0..VOCAB.len())].to_string()).collect()
}

/// A variant of `a` with random substitutions, insertions and deletions.
fn mutate(rng: &mut ChaCha8Rng, a: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    for t in a {
        match rng.random_range(0..10) {
            0 => {}
            1 => out.push(VOCAB[rng.random_range(0..VOCAB.len())].to_string()),
            2 => {
                out.push(t.clone());
                out.push(VOCAB[rng.random_range(0..VOCAB.len())].to_string());
            }
            _ => out.push(t.clone()),
        }
    }
    out.truncate(30);
    out
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

#[test]
fn similarity_oracle_suite() {
    criterion("similarity-oracles", Some(Duration::from_secs(10)), || {
        let mut rng = ChaCha8Rng::seed_from_u64(1001);
        let docs: Vec<Vec<String>> = (0..50).map(|_| random_tokens(&mut rng, 30)).collect();
        let doc_seqs: Vec<TokenSequence> = docs.iter().map(|d| tokenize(&d.join(" "))).collect();
        let idf = IdfTable::fit(&doc_seqs);
        for case in 0..500 {
            let a = random_tokens(&mut rng, 30);
            let b = if case % 3 == 0 { random_tokens(&mut rng, 30) } else { mutate(&mut rng, &a) };
            let (sa, sb) = (tokenize(&a.join(" ")), tokenize(&b.join(" ")));
            ensure!(sa.tokens() == a.as_slice() && sb.tokens() == b.as_slice(), "case {case}: tokenizer altered input");
            let f = assemble_features(&sa, &sb, &idf).map_err(|e| e.to_string())?.vector;

            let (j, d, o, c) = oracles::set_scores(&a, &b);
            let lev = oracles::levenshtein_norm(&a, &b);
            let tf = oracles::tfidf_cosine(&a, &b, &docs);
            for (name, got, want) in [
                ("jaccard", f.jaccard, j),
                ("dice", f.dice, d),
                ("overlap", f.overlap, o),
                ("cosine", f.cosine, c),
                ("levenshtein_norm", f.levenshtein_norm, lev),
                ("tfidf_cosine", f.tfidf_cosine, tf),
            ] {
                ensure!(close(got, want), "case {case}: {name} {got} vs oracle {want}");
            }
            let ints = [
                ("unique_left", f.unique_left, oracles::distinct(&a).len()),
                ("unique_right", f.unique_right, oracles::distinct(&b).len()),
                ("total_left", f.total_left, a.len()),
                ("total_right", f.total_right, b.len()),
                ("shared", f.shared, oracles::shared(&a, &b)),
                ("token_diff", f.token_diff, a.len().abs_diff(b.len())),
            ];
            for (name, got, want) in ints {
                ensure!(got == want as f64, "case {case}: {name} {got} vs oracle {want}");
            }
        }
        Ok("500 pairs (length <= 30, alphabet 10), six similarities within 1e-12, counts exact".into())
    });
}

// ---------------------------------------------------------------------------
// tree edit distance

fn random_tree(rng: &mut ChaCha8Rng) -> SyntaxTree {
    let n = rng.random_range(1..=8);
    let mut nodes: Vec<SyntaxNode> = (0..n)
        .map(|_| SyntaxNode {
            kind: ["a", "b", "c"][rng.random_range(0..3)].to_string(),
            children: vec![],
        })
        .collect();
    for i in 1..n {
        let parent = rng.random_range(0..i);
        nodes[parent].children.push(i);
    }
    SyntaxTree::new(nodes, 0).expect("parent links form a tree")
}

#[test]
fn ted_metric_axioms() {
    criterion("ted-metric-axioms", Some(Duration::from_secs(60)), || {
        let mut rng = ChaCha8Rng::seed_from_u64(2002);
        let trees: Vec<SyntaxTree> = (0..200).map(|_| random_tree(&mut rng)).collect();
        let n = trees.len();
        for i in 0..n {
            let (a, b, c) = (&trees[i], &trees[(i + 1) % n], &trees[(i + 2) % n]);
            let ab = tree_edit_distance(a, b);
            let oracle = oracles::ted_by_mappings(a, b);
            ensure!(ab == oracle, "tree {i}: zhang-shasha {ab} vs exhaustive {oracle}");
            ensure!(tree_edit_distance(a, a) == 0, "tree {i}: d(a, a) != 0");
            ensure!(ab == tree_edit_distance(b, a), "tree {i}: asymmetric");
            let (bc, ac) = (tree_edit_distance(b, c), tree_edit_distance(a, c));
            ensure!(ac <= ab + bc, "tree {i}: triangle {ac} > {ab} + {bc}");
        }
        Ok("200 trees of <= 8 nodes: exact match with exhaustive mapping search; symmetric; triangle holds".into())
    });
}

// ---------------------------------------------------------------------------
// fusion head

fn random_params(d: usize, d_k: usize, hidden: usize, seed: u64) -> FusionParams {
    let mut p = FusionParams::zeros(d, d_k, hidden);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in p.tensors.iter_mut() {
        for x in t.data.iter_mut() {
            let mag: f64 = rng.random_range(0.05..0.6);
            *x = if rng.random_bool(0.5) { mag } else { -mag };
        }
    }
    p
}

fn random_sample(d: usize, rng: &mut ChaCha8Rng, label: u8) -> FusionSample {
    let raw: [f64; 7] = std::array::from_fn(|_| rng.random_range(0.01..1.0));
    let sum: f64 = raw.iter().sum();
    FusionSample {
        pair_id: String::new(),
        h: (0..d).map(|_| rng.random_range(-1.5..1.5)).collect(),
        s: raw.map(|v| v / sum),
        v: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
        label: Some(label),
    }
}

#[test]
fn gradient_check() {
    criterion("gradient-check", Some(Duration::from_secs(30)), || {
        let params = random_params(8, 6, 5, 3003);
        let mut rng = ChaCha8Rng::seed_from_u64(3004);
        let samples: Vec<FusionSample> = (0..10).map(|i| random_sample(8, &mut rng, (i % 7) as u8)).collect();
        let batch: Vec<&FusionSample> = samples.iter().collect();
        let (_, analytic) = batch_gradient(&batch, &params, 0.1).map_err(|e| e.to_string())?;
        let step = 1e-6;
        let mut worst = (0.0f64, "");
        let mut checked = 0;
        for (ti, t) in params.tensors.iter().enumerate() {
            for k in 0..t.data.len() {
                let mut plus = params.clone();
                plus.tensors[ti].data[k] += step;
                let mut minus = params.clone();
                minus.tensors[ti].data[k] -= step;
                let numeric = (batch_loss(&batch, &plus, 0.1).unwrap() - batch_loss(&batch, &minus, 0.1).unwrap())
                    / (2.0 * step);
                let a = analytic[ti][k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
                if rel > worst.0 {
                    worst = (rel, TENSOR_NAMES[ti]);
                }
                checked += 1;
            }
        }
        ensure!(worst.0 < 1e-4, "max relative error {:e} in {}", worst.0, worst.1);
        Ok(format!("{checked} parameters, max relative error {:.2e}", worst.0))
    });
}

#[test]
fn film_identity_at_init() {
    criterion("film-identity-at-init", None, || {
        let mut rng = ChaCha8Rng::seed_from_u64(4004);
        for k in 0..100 {
            let p = FusionParams::init(16, 8, 32, [0.0; 7], k);
            let s = random_sample(16, &mut rng, 0);
            let out = film_modulate(&s.h, &s.s, &p).map_err(|e| e.to_string())?;
            ensure!(out == s.h, "case {k}: film output differs from h");
        }
        Ok("100 random (h, s): output == h bit-for-bit".into())
    });
}

#[test]
fn toy_training() {
    criterion("toy-training", None, || {
        let mut rng = ChaCha8Rng::seed_from_u64(5005);
        let d = 16;
        let centers: Vec<Vec<f64>> = (0..3).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let data: Vec<FusionSample> = (0..200)
            .map(|i| {
                let label = (i % 3) as u8;
                FusionSample {
                    pair_id: format!("t{i}"),
                    h: centers[label as usize].iter().map(|c| c + rng.random_range(-0.3..0.3)).collect(),
                    s: [1.0 / 7.0; 7],
                    v: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
                    label: Some(label),
                }
            })
            .collect();
        let cfg = FusionConfig {
            d_k: 16,
            hidden: 8,
            epochs: 40,
            learning_rate: 1e-2,
            seed: 5006,
            ..Default::default()
        };
        let first = train(&data, &[], &cfg, |_, _| Ok(())).map_err(|e| e.to_string())?;
        let preds = predict_all(&data, &first.params).map_err(|e| e.to_string())?;
        let acc = preds.iter().zip(&data).filter(|(p, s)| Some(p.label()) == s.label).count() as f64 / 200.0;
        ensure!(acc >= 0.95, "training accuracy {acc} after {} epochs", cfg.epochs);
        let (l1, l3) = (first.epochs[0].loss, first.epochs[2].loss);
        ensure!(l3 < l1, "epoch-3 loss {l3} not below epoch-1 loss {l1}");
        let second = train(&data, &[], &cfg, |_, _| Ok(())).map_err(|e| e.to_string())?;
        ensure!(first.params == second.params && first.steps == second.steps, "seeded reruns differ");
        Ok(format!("accuracy {acc:.3} at {} epochs; loss {l1:.4} -> {l3:.4}; reruns bit-identical", cfg.epochs))
    });
}

// ---------------------------------------------------------------------------
// curation

fn random_source(rng: &mut ChaCha8Rng, min_chars: usize) -> String {
    const WORDS: [&str; 16] = [
        "int", "value", "if", "for", "while", "return", "count", "list", "get", "size", "(", ")", "{", "}", ";", "catch",
    ];
    let mut s = String::new();
    while s.chars().count() < min_chars {
        s.push_str(WORDS[rng.random_range(0..WORDS.len())]);
        s.push(if rng.random_range(0..8) == 0 { '\n' } else { ' ' });
        // identifiers make every fragment distinct
        s.push_str(&format!("v{} ", rng.random_range(0..1_000_000)));
    }
    s
}

struct SyntheticCorpus {
    fragments: Vec<CodeFragment>,
    pairs: Vec<PairRecord>,
    short_ids: BTreeSet<String>,
    duplicate_ids: BTreeSet<String>,
}

fn synthetic_corpus(seed: u64) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = SyntheticCorpus {
        fragments: Vec::new(),
        pairs: Vec::new(),
        short_ids: BTreeSet::new(),
        duplicate_ids: BTreeSet::new(),
    };
    let mut per_project: Vec<Vec<String>> = Vec::new();
    for p in 0..50 {
        let project = format!("proj{p:02}");
        let mut ids = Vec::new();
        for k in 0..30 {
            let id = format!("{project}_f{k}");
            let min_chars = 200 + rng.random_range(0..150);
            c.fragments.push(CodeFragment::new(&id, &project, random_source(&mut rng, min_chars)));
            ids.push(id);
        }
        for k in 0..2 {
            let id = format!("{project}_short{k}");
            let mut src = random_source(&mut rng, 20);
            src.truncate(150 + k);
            c.fragments.push(CodeFragment::new(&id, &project, src));
            c.short_ids.insert(id);
        }
        // exactly 199 and 200 characters straddle the filter edge
        let mut edge = random_source(&mut rng, 260);
        edge = edge.chars().take(199).collect();
        let edge_id = format!("{project}_edge199");
        c.fragments.push(CodeFragment::new(&edge_id, &project, edge.clone()));
        c.short_ids.insert(edge_id);
        let id200 = format!("{project}_edge200");
        c.fragments.push(CodeFragment::new(&id200, &project, format!("{edge}x")));
        ids.push(id200);

        let original = c.fragments[c.fragments.len() - 34].source_text.clone();
        let dup_id = format!("{project}_dup");
        c.fragments.push(CodeFragment::new(&dup_id, &project, format!("  {}\t", original.replace(' ', "  "))));
        c.duplicate_ids.insert(dup_id.clone());

        let mut pair_no = 0;
        let mut add = |c: &mut SyntheticCorpus, rng: &mut ChaCha8Rng, label: u8, left: Option<&str>| {
            let l = left.map(str::to_string).unwrap_or_else(|| ids[rng.random_range(0..ids.len())].clone());
            let mut r = ids[rng.random_range(0..ids.len())].clone();
            while r == l {
                r = ids[rng.random_range(0..ids.len())].clone();
            }
            c.pairs.push(PairRecord {
                pair_id: format!("{project}_p{pair_no}"),
                left: l,
                right: r,
                label,
                split: Split::Unassigned,
            });
            pair_no += 1;
        };
        for _ in 0..20 {
            add(&mut c, &mut rng, 0, None);
        }
        for _ in 0..12 {
            add(&mut c, &mut rng, 6, None);
        }
        for label in 1..=5 {
            for _ in 0..4 {
                add(&mut c, &mut rng, label, None);
            }
        }
        add(&mut c, &mut rng, 3, Some(&format!("{project}_short0")));
        add(&mut c, &mut rng, 4, Some(&dup_id));
        per_project.push(ids);
    }
    // cross-project pairs; those spanning two splits must be discarded
    for k in 0..40 {
        let (pa, pb) = (rng.random_range(0..50), rng.random_range(0..50));
        if pa == pb {
            continue;
        }
        c.pairs.push(PairRecord {
            pair_id: format!("cross{k}"),
            left: per_project[pa][rng.random_range(0..30)].clone(),
            right: per_project[pb][rng.random_range(0..30)].clone(),
            label: rng.random_range(0..7),
            split: Split::Unassigned,
        });
    }
    c
}

#[test]
fn curation_invariants() {
    criterion("curation-invariants", None, || {
        let corpus = synthetic_corpus(6006);
        let project_of: HashMap<String, String> =
            corpus.fragments.iter().map(|f| (f.fragment_id.clone(), f.project_id.clone())).collect();
        let mut plan = SplitPlan::new(6007);
        plan.train_caps = BTreeMap::from([(0, 400), (6, 250)]);
        let out = curate(corpus.fragments.clone(), corpus.pairs.clone(), &plan, &CurateOptions::default())
            .map_err(|e| e.to_string())?;

        // leakage
        let mut fragment_split: HashMap<&str, Split> = HashMap::new();
        for (split, pairs) in [(Split::Train, &out.train), (Split::Validation, &out.validation), (Split::Test, &out.test)] {
            for p in pairs {
                ensure!(p.split == split, "{} tagged {:?} in {:?}", p.pair_id, p.split, split);
                for id in [&p.left, &p.right] {
                    let proj = &project_of[id.as_str()];
                    ensure!(out.project_splits[proj] == split, "{} leaks project {proj}", p.pair_id);
                    if let Some(prev) = fragment_split.insert(id, split) {
                        ensure!(prev == split, "fragment {id} in two splits");
                    }
                }
            }
        }
        let spans: usize = corpus
            .pairs
            .iter()
            .filter(|p| {
                let (l, r) = (&project_of[&p.left], &project_of[&p.right]);
                p.pair_id.starts_with("cross")
                    && out.project_splits.get(l) != out.project_splits.get(r)
            })
            .count();
        ensure!(out.report.pairs_cross_split == spans, "cross-split drops {} vs {spans}", out.report.pairs_cross_split);

        // caps
        let count = |label: u8| out.train.iter().filter(|p| p.label == label).count();
        let train_projects = out.project_splits.values().filter(|&&s| s == Split::Train).count();
        ensure!(count(0) == 400, "label-0 train count {} (train projects {train_projects})", count(0));
        ensure!(count(6) == 250, "label-6 train count {}", count(6));

        // length filter and dedup
        let expected_short = corpus.fragments.iter().filter(|f| f.source_text.chars().count() < 200).count();
        ensure!(expected_short == corpus.short_ids.len(), "fixture bookkeeping");
        ensure!(out.report.fragments.too_short == expected_short, "too_short {}", out.report.fragments.too_short);
        ensure!(out.fragments.iter().all(|f| f.char_length >= 200), "kept a short fragment");
        let kept: BTreeSet<&str> = out.fragments.iter().map(|f| f.fragment_id.as_str()).collect();
        let expected: BTreeSet<&str> = corpus
            .fragments
            .iter()
            .map(|f| f.fragment_id.as_str())
            .filter(|id| !corpus.short_ids.contains(*id) && !corpus.duplicate_ids.contains(*id))
            .collect();
        ensure!(kept == expected, "kept set differs from the fragments >= 200 chars minus duplicates");
        let (again, stats) = filter_and_dedup(out.fragments.clone(), 200);
        ensure!(again == out.fragments && stats.duplicates == 0 && stats.too_short == 0, "dedup not idempotent");
        Ok(format!(
            "{train_projects} train projects, caps 400/250 exact, {} cross-split pairs dropped, {expected_short} short fragments dropped",
            spans
        ))
    });
}

#[test]
fn greedy_diversity_worked_example() {
    criterion("greedy-diversity", None, || {
        // J(A,B) = 0.9, J(A,C) = 0.1, J(B,C) = 0.1
        let sim = vec![vec![1.0, 0.9, 0.1], vec![0.9, 1.0, 0.1], vec![0.1, 0.1, 1.0]];
        for first in 0..3 {
            for budget in 1..=3 {
                let got = greedy_diverse(3, budget, first, |i, j| sim[i][j]);
                let want = oracles::greedy_trace(&sim, budget, first);
                ensure!(got == want, "first {first}, budget {budget}: {got:?} vs trace {want:?}");
            }
        }
        // with A first and room for two, the optimum over all pairs containing A is {A, C}
        let best = (1..3).min_by(|&x, &y| sim[0][x].partial_cmp(&sim[0][y]).unwrap()).unwrap();
        let two = greedy_diverse(3, 2, 0, |i, j| sim[i][j]);
        ensure!(two == vec![0, best] && best == 2, "picked {two:?}");
        Ok("traces match for every first pick and budget; A then C".into())
    });
}

// ---------------------------------------------------------------------------
// arbitration

/// p with `confidence` on `label` and the rest spread evenly.
fn peaked(label: u8, confidence: f64) -> ProbabilityDistribution {
    let mut p = [(1.0 - confidence) / 6.0; NUM_CLASSES];
    p[label as usize] = confidence;
    ProbabilityDistribution::new(p)
}

fn verdict_json(label: u8) -> String {
    let mut probs = [0.0; NUM_CLASSES];
    probs[label as usize] = 1.0;
    serde_json::json!({
        "mode": "prior-guided", "thought": "-", "prediction": label,
        "confidence": 0.9, "explanation": "-", "probabilities": probs
    })
    .to_string()
}

fn neighbour(rng: &mut ChaCha8Rng, label: u8) -> u8 {
    match label {
        0 => 1,
        6 => 5,
        l if rng.random_bool(0.5) => l - 1,
        l => l + 1,
    }
}

#[test]
fn arbitration_sign_pattern() {
    criterion("arbitration-sign-pattern", Some(Duration::from_secs(10)), || {
        // Primary: 95% correct when confident, 70% below tau, errors land on
        // a neighbouring label. Arbiter: always right on label-5
        // predictions, right 60% of the time elsewhere, otherwise uniform.
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(7007);
        let mut truth = BTreeMap::new();
        let mut dists = Vec::with_capacity(n);
        let mut replies = HashMap::new();
        for i in 0..n {
            let id = format!("s{i:05}");
            let t: u8 = rng.random_range(0..7);
            let conf: f64 = rng.random_range(0.3..1.0);
            let correct = rng.random_bool(if conf >= 0.6 { 0.95 } else { 0.7 });
            let primary = if correct { t } else { neighbour(&mut rng, t) };
            let arbiter_label = if primary == 5 || rng.random_bool(0.6) {
                t
            } else {
                *(0..7u8).filter(|&l| l != t).collect::<Vec<_>>().choose(&mut rng).unwrap()
            };
            truth.insert(id.clone(), t);
            replies.insert(id.clone(), verdict_json(arbiter_label));
            dists.push((id, peaked(primary, conf)));
        }
        let arbiter = FnArbiter(|pair_id: &str, _prompt: &str| {
            replies.get(pair_id).cloned().ok_or_else(|| ArbiterError::Mock(pair_id.to_string()))
        });
        let items: Vec<ArbitrationItem> = dists
            .iter()
            .map(|(id, d)| ArbitrationItem {
                pair_id: id,
                code_left: "int a() { return 1; }",
                code_right: "int b() { return 2; }",
                distribution: d,
            })
            .collect();
        let base: BTreeMap<String, u8> = dists.iter().map(|(id, d)| (id.clone(), d.label())).collect();
        let mut delta = BTreeMap::new();
        for mode in [TriggerMode::Label5Only, TriggerMode::Labels2345] {
            let policy = TriggerPolicy::new(mode, 0.6).unwrap();
            let decisions = decide_all(&items, &policy, &arbiter, &ArbiterRunConfig::default()).map_err(|e| e.to_string())?;
            let expected = dists.iter().filter(|(_, d)| should_trigger(d, &policy)).count();
            let triggered = decisions.iter().filter(|d| d.triggered).count();
            ensure!(triggered == expected, "{mode:?}: {triggered} triggered vs {expected}");
            let fin: BTreeMap<String, u8> = decisions.iter().map(|d| (d.pair_id.clone(), d.final_prediction)).collect();
            let cmp = compare_policies(&truth, &base, &fin).map_err(|e| e.to_string())?;
            delta.insert(format!("{mode:?}"), (cmp.delta.macro_f1, cmp.delta.macro_precision, triggered));
        }
        let (f1_5, p_5, n5) = delta["Label5Only"];
        let (f1_all, p_all, n_all) = delta["Labels2345"];
        ensure!(f1_5 > 0.0, "label5_only delta macro-F1 {f1_5}");
        ensure!(p_5 > p_all, "delta macro-P label5_only {p_5} <= labels2345 {p_all}");
        Ok(format!(
            "label5_only: dF1 {f1_5:+.4}, dP {p_5:+.4} ({n5} arbitrated); labels2345: dF1 {f1_all:+.4}, dP {p_all:+.4} ({n_all} arbitrated)"
        ))
    });
}

#[test]
fn trigger_threshold_behavior() {
    criterion("trigger-threshold", None, || {
        // 1000 predictions below 0.6 with exactly 310 correct; 1000 at or
        // above with exactly 950 correct, split evenly over the upper bins.
        let mut rng = ChaCha8Rng::seed_from_u64(8008);
        let (mut truths, mut preds, mut confs, mut dists) = (vec![], vec![], vec![], vec![]);
        for (lo, hi, n, correct) in [(0.2, 0.6, 1000, 310), (0.6, 0.8, 500, 475), (0.8, 1.0, 500, 475)] {
            let mut flags: Vec<bool> = (0..n).map(|i| i < correct).collect();
            flags.shuffle(&mut rng);
            for ok in flags {
                let t: u8 = rng.random_range(0..7);
                let p = if ok { t } else { (t + rng.random_range(1..7)) % 7 };
                let c: f64 = rng.random_range(lo..hi);
                truths.push(t);
                preds.push(p);
                confs.push(c);
                dists.push(peaked(p, c));
            }
        }
        let bins = confidence_bin_report(&truths, &preds, &confs, &[0.0, 0.6, 0.8, 1.0]).map_err(|e| e.to_string())?;
        let acc: Vec<f64> = bins.iter().map(|b| b.accuracy.unwrap_or(f64::NAN)).collect();
        ensure!((acc[0] - 0.31).abs() < 1e-12, "accuracy below 0.6 is {}", acc[0]);
        ensure!((acc[1] - 0.95).abs() < 1e-12 && (acc[2] - 0.95).abs() < 1e-12, "upper bins {acc:?}");

        for mode in [TriggerMode::Off, TriggerMode::AllLowConfidence, TriggerMode::Label5Only, TriggerMode::Labels2345] {
            let policy = TriggerPolicy::new(mode, 0.6).unwrap();
            for (i, d) in dists.iter().enumerate() {
                let label = preds[i];
                let matches = match mode {
                    TriggerMode::Off => false,
                    TriggerMode::AllLowConfidence => ![0, 1, 6].contains(&label),
                    TriggerMode::Label5Only => label == 5,
                    TriggerMode::Labels2345 => (2..=5).contains(&label),
                };
                let want = confs[i] < 0.6 && matches;
                ensure!(should_trigger(d, &policy) == want, "{mode:?}, row {i}: conf {} label {label}", confs[i]);
            }
        }
        Ok(format!("bin accuracies {:.2}/{:.2}/{:.2}; trigger sets exact for all four policies", acc[0], acc[1], acc[2]))
    });
}

// ---------------------------------------------------------------------------
// metrics

#[test]
fn metrics_oracle() {
    criterion("metrics-oracle", None, || {
        // truths 0,1,1,2 / preds 0,1,2,2, worked by hand:
        // class 0: P 1, R 1, F1 1; class 1: P 1, R 1/2, F1 2/3; class 2: P 1/2, R 1, F1 2/3
        // macro over 7 classes: P 2.5/7, R 2.5/7, F1 (7/3)/7 = 1/3; weighted F1 (1 + 4/3 + 2/3)/4 = 3/4
        let c = confusion_and_prf(&[0, 1, 1, 2], &[0, 1, 2, 2]).map_err(|e| e.to_string())?;
        let mut want = [[0u64; 7]; 7];
        want[0][0] = 1;
        want[1][1] = 1;
        want[1][2] = 1;
        want[2][2] = 1;
        ensure!(c.confusion == want, "confusion {:?}", c.confusion);
        let per = [(1.0, 1.0, 1.0), (1.0, 0.5, 2.0 / 3.0), (0.5, 1.0, 2.0 / 3.0)];
        for (k, (p, r, f)) in per.iter().enumerate() {
            let m = &c.per_class[k];
            ensure!(close(m.precision, *p) && close(m.recall, *r) && close(m.f1, *f), "class {k}: {m:?}");
        }
        ensure!(c.per_class[3..].iter().all(|m| m.f1 == 0.0 && m.support == 0), "absent classes");
        ensure!(close(c.macro_avg.precision, 2.5 / 7.0), "macro P {}", c.macro_avg.precision);
        ensure!(close(c.macro_avg.recall, 2.5 / 7.0), "macro R {}", c.macro_avg.recall);
        ensure!(close(c.macro_avg.f1, 1.0 / 3.0), "macro F1 {}", c.macro_avg.f1);
        ensure!(close(c.weighted.f1, 0.75) && close(c.accuracy, 0.75), "weighted F1 / accuracy");

        let mut rng = ChaCha8Rng::seed_from_u64(9009);
        let truths: Vec<u8> = (0..1000).map(|_| rng.random_range(0..7)).collect();
        let dists: Vec<[f64; 7]> = (0..1000).map(|_| std::array::from_fn(|_| rng.random_range(0.0..1.0))).collect();
        let cov: Vec<f64> = (1..=7).map(|k| topk_coverage(&truths, &dists, k).unwrap()).collect();
        ensure!(cov.windows(2).all(|w| w[0] <= w[1]) && cov[6] == 1.0, "top-k coverage {cov:?}");

        let perfect: Vec<u8> = (0..700).map(|i| (i % 7) as u8).collect();
        let ci = bootstrap_ci(&perfect, &perfect, 1000, 9010).map_err(|e| e.to_string())?;
        ensure!(ci == (1.0, 1.0), "bootstrap CI of perfect predictions {ci:?}");
        Ok("4-sample case exact; top-k non-decreasing to 1.0; perfect CI (1.0, 1.0)".into())
    });
}

// ---------------------------------------------------------------------------
// end to end

#[test]
fn end_to_end_fixture() {
    criterion("end-to-end-fixture", None, || {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let a = tmp.path().join("a");
        common::run_fixture_pipeline(&a, &[]);
        let first = common::snapshot(&a);
        let report: serde_json::Value =
            serde_json::from_slice(&first["report.json"]).map_err(|e| e.to_string())?;
        ensure!(report["n"].as_u64().unwrap_or(0) > 0, "empty report");

        common::run_fixture_pipeline(&a, &[]);
        let second = common::snapshot(&a);
        ensure!(first == second, "rerun in place changed {:?}", differing(&first, &second));

        // a fresh directory differs only in the manifests, which record paths
        let b = tmp.path().join("b");
        common::run_fixture_pipeline(&b, &[]);
        let third = common::snapshot(&b);
        let strip = |m: &BTreeMap<String, Vec<u8>>| -> BTreeMap<String, Vec<u8>> {
            m.iter().filter(|(k, _)| !k.contains("manifest")).map(|(k, v)| (k.clone(), v.clone())).collect()
        };
        ensure!(strip(&first) == strip(&third), "outputs depend on the directory: {:?}", differing(&first, &third));
        Ok(format!(
            "{} files byte-identical on rerun; test n {}, macro-F1 {:.3}",
            first.len(),
            report["n"],
            report["macro"]["f1"].as_f64().unwrap_or(f64::NAN)
        ))
    });
}

fn differing(a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) -> Vec<String> {
    let keys: HashSet<&String> = a.keys().chain(b.keys()).collect();
    let mut out: Vec<String> = keys.into_iter().filter(|k| a.get(*k) != b.get(*k)).cloned().collect();
    out.sort();
    out
}
