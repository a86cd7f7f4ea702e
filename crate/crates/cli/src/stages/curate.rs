use std::collections::BTreeMap;

use anyhow::Context;
use clonegrade::corpus::{curate, load_fragments, load_pairs, CurateOptions, FragmentRecord, SplitPlan};
use clonegrade::jsonl;
use serde::Serialize;

use super::{require, MANIFEST};
use crate::config::FileConfig;
use crate::manifest::{write_json, Manifest};
use crate::CurateArgs;

#[derive(Debug, Serialize)]
struct Resolved {
    seed: u64,
    train_cap_0: usize,
    train_cap_6: usize,
    val_target: usize,
    min_chars: usize,
    diversity: bool,
    diversity_bins: usize,
}

pub(super) fn run(a: &CurateArgs, cfg: &FileConfig) -> anyhow::Result<serde_json::Value> {
    require(&a.fragments, "--fragments")?;
    require(&a.pairs, "--pairs")?;
    let c = &cfg.curate;
    let defaults = CurateOptions::default();
    let base = SplitPlan::new(0);
    let r = Resolved {
        seed: cfg.resolve_seed(a.seed, c.seed)?,
        train_cap_0: a.train_cap_0.or(c.train_cap_0).unwrap_or(base.train_caps[&0]),
        train_cap_6: a.train_cap_6.or(c.train_cap_6).unwrap_or(base.train_caps[&6]),
        val_target: a.val_target.or(c.val_target).unwrap_or(base.validation_target),
        min_chars: a.min_chars.or(c.min_chars).unwrap_or(defaults.min_chars),
        diversity: if a.no_diversity { false } else { c.diversity.unwrap_or(defaults.diversity) },
        diversity_bins: a.diversity_bins.or(c.diversity_bins).unwrap_or(defaults.diversity_bins),
    };

    let mut manifest = Manifest::new("curate");
    manifest.config(&r)?;
    manifest.input(&a.fragments)?;
    manifest.input(&a.pairs)?;

    let fragments = load_fragments(&a.fragments).with_context(|| a.fragments.display().to_string())?;
    let pairs = load_pairs(&a.pairs).with_context(|| a.pairs.display().to_string())?;
    let plan = SplitPlan {
        train_caps: BTreeMap::from([(0, r.train_cap_0), (6, r.train_cap_6)]),
        validation_target: r.val_target,
        seed: r.seed,
        ..base
    };
    let opts = CurateOptions {
        min_chars: r.min_chars,
        diversity: r.diversity,
        diversity_bins: r.diversity_bins,
    };
    let out = curate(fragments, pairs, &plan, &opts)?;

    let dir = &a.out;
    let records: Vec<FragmentRecord> = out.fragments.iter().map(FragmentRecord::from).collect();
    jsonl::write(&dir.join("fragments.jsonl"), &records)?;
    jsonl::write(&dir.join("train.jsonl"), &out.train)?;
    jsonl::write(&dir.join("validation.jsonl"), &out.validation)?;
    jsonl::write(&dir.join("test.jsonl"), &out.test)?;
    write_json(&dir.join("project_splits.json"), &out.project_splits)?;
    write_json(&dir.join("curation_report.json"), &out.report)?;
    for f in [
        "fragments.jsonl",
        "train.jsonl",
        "validation.jsonl",
        "test.jsonl",
        "project_splits.json",
        "curation_report.json",
    ] {
        manifest.output(f);
    }
    manifest.write(&dir.join(MANIFEST))?;

    Ok(serde_json::json!({
        "command": "curate",
        "fragments_kept": out.report.fragments.kept,
        "train": out.train.len(),
        "validation": out.validation.len(),
        "test": out.test.len(),
    }))
}
