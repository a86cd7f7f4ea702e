use std::collections::{BTreeSet, HashMap};

use clonegrade::jsonl;
use clonegrade::lexical::{assemble_features, tokenize, IdfTable, LexicalCacheRow, TokenSequence};
use clonegrade::syntax::{
    parse_fragment, structural_vector_capped, JavaParser, StructuralCacheRow, StructuralFeatures, SyntaxTree,
    DEFAULT_TED_NODE_CAP,
};
use rayon::prelude::*;
use serde::Serialize;

use super::{CuratedDir, MANIFEST};
use crate::manifest::{write_json, Manifest};
use crate::FeaturizeArgs;

#[derive(Debug, Serialize)]
struct FeaturizeReport {
    pairs: usize,
    fragments_parsed: usize,
    /// fragment id -> parser message
    parse_failures: std::collections::BTreeMap<String, String>,
    pairs_parse_failed: usize,
    pairs_ted_approx: usize,
    pairs_levenshtein_truncated: usize,
}

pub(super) fn run(a: &FeaturizeArgs) -> anyhow::Result<serde_json::Value> {
    let ted_cap = a.ted_node_cap.unwrap_or(DEFAULT_TED_NODE_CAP);
    let mut manifest = Manifest::new("featurize");
    manifest.config(serde_json::json!({ "ted_node_cap": ted_cap }))?;
    let curated = CuratedDir::load(&a.curated, &mut manifest)?;
    let sources = curated.sources();
    let pairs: Vec<_> = curated.all_pairs().collect();

    let referenced: BTreeSet<&str> = pairs.iter().flat_map(|p| [p.left.as_str(), p.right.as_str()]).collect();
    for id in &referenced {
        anyhow::ensure!(sources.contains_key(id), "pair references unknown fragment {id}");
    }
    let ids: Vec<&str> = referenced.into_iter().collect();

    let tokens: HashMap<&str, TokenSequence> = ids.par_iter().map(|&id| (id, tokenize(sources[id]))).collect();
    let train_ids: BTreeSet<&str> =
        curated.train.iter().flat_map(|p| [p.left.as_str(), p.right.as_str()]).collect();
    let idf = IdfTable::fit(train_ids.iter().map(|id| &tokens[id]));

    let lexical: Vec<LexicalCacheRow> = pairs
        .par_iter()
        .map(|p| {
            let f = assemble_features(&tokens[p.left.as_str()], &tokens[p.right.as_str()], &idf)?;
            Ok(LexicalCacheRow {
                pair_id: p.pair_id.clone(),
                lexical: f.vector.to_array().to_vec(),
                levenshtein_truncated: f.levenshtein_truncated,
            })
        })
        .collect::<anyhow::Result<_>>()?;

    // tree-sitter parsers are stateful, so each worker owns one
    let trees: HashMap<&str, Result<SyntaxTree, String>> = ids
        .par_iter()
        .map_init(JavaParser::new, |parser, &id| {
            (id, parse_fragment(parser, id, sources[id]).map_err(|e| e.to_string()))
        })
        .collect();

    let structural: Vec<StructuralCacheRow> = pairs
        .par_iter()
        .map(|p| {
            let f = match (&trees[p.left.as_str()], &trees[p.right.as_str()]) {
                (Ok(l), Ok(r)) => structural_vector_capped(l, r, ted_cap),
                _ => StructuralFeatures::parse_failure(),
            };
            StructuralCacheRow {
                pair_id: p.pair_id.clone(),
                structural: f.vector.to_array().to_vec(),
                parse_failed: f.parse_failed,
                ted_approx: f.ted_approx,
            }
        })
        .collect();

    let report = FeaturizeReport {
        pairs: pairs.len(),
        fragments_parsed: trees.values().filter(|t| t.is_ok()).count(),
        parse_failures: trees
            .iter()
            .filter_map(|(id, t)| t.as_ref().err().map(|e| (id.to_string(), e.clone())))
            .collect(),
        pairs_parse_failed: structural.iter().filter(|r| r.parse_failed).count(),
        pairs_ted_approx: structural.iter().filter(|r| r.ted_approx).count(),
        pairs_levenshtein_truncated: lexical.iter().filter(|r| r.levenshtein_truncated).count(),
    };

    let dir = &a.out;
    jsonl::write(&dir.join("lexical.jsonl"), &lexical)?;
    jsonl::write(&dir.join("structural.jsonl"), &structural)?;
    write_json(&dir.join("idf.json"), &idf)?;
    write_json(&dir.join("featurize_report.json"), &report)?;
    for f in ["lexical.jsonl", "structural.jsonl", "idf.json", "featurize_report.json"] {
        manifest.output(f);
    }
    manifest.write(&dir.join(MANIFEST))?;

    Ok(serde_json::json!({
        "command": "featurize",
        "pairs": report.pairs,
        "pairs_parse_failed": report.pairs_parse_failed,
        "pairs_ted_approx": report.pairs_ted_approx,
    }))
}
