use clonegrade::jsonl;
use clonegrade::lexical::{LexicalCacheRow, LEXICAL_DIM};
use clonegrade::prior::{fit_prior, predict_batch, PriorCacheRow, PriorExample, PriorKind};

use super::{index_by_pair, read_rows, require_in, CuratedDir, MANIFEST};
use crate::config::FileConfig;
use crate::manifest::Manifest;
use crate::{TrainPriorArgs, UsageError};

pub(super) fn lexical_array(row: &LexicalCacheRow) -> anyhow::Result<[f64; LEXICAL_DIM]> {
    row.lexical.as_slice().try_into().map_err(|_| {
        anyhow::anyhow!("lexical row {} has {} values, expected {LEXICAL_DIM}", row.pair_id, row.lexical.len())
    })
}

pub(super) fn run(a: &TrainPriorArgs, cfg: &FileConfig) -> anyhow::Result<serde_json::Value> {
    let mut config = cfg.prior_config()?;
    config.seed = cfg.seed(a.seed, cfg.prior.as_ref())?;
    if let Some(k) = &a.kind {
        config.kind = serde_json::from_value::<PriorKind>(serde_json::Value::String(k.clone()))
            .map_err(|_| UsageError(format!("--kind: expected gbdt or softmax_regression, got {k:?}")))?;
    }
    if let Some(r) = a.rounds {
        config.rounds = r;
    }

    let mut manifest = Manifest::new("train-prior");
    manifest.config(&config)?;
    let curated = CuratedDir::load(&a.curated, &mut manifest)?;
    let lexical_path = require_in(&a.features, "lexical.jsonl", "--features")?;
    let lexical = index_by_pair(read_rows::<LexicalCacheRow>(&lexical_path, &mut manifest)?, |r| &r.pair_id, "lexical.jsonl")?;

    let lookup = |pair_id: &str| -> anyhow::Result<[f64; LEXICAL_DIM]> {
        let row = lexical
            .get(pair_id)
            .ok_or_else(|| anyhow::anyhow!("lexical.jsonl has no row for pair {pair_id}"))?;
        lexical_array(row)
    };
    let train: Vec<PriorExample> = curated
        .train
        .iter()
        .map(|p| {
            Ok(PriorExample {
                pair_id: p.pair_id.clone(),
                features: lookup(&p.pair_id)?,
                label: p.label,
            })
        })
        .collect::<anyhow::Result<_>>()?;
    let model = fit_prior(&train, &config)?;

    let all: Vec<_> = curated.all_pairs().collect();
    let xs: Vec<[f64; LEXICAL_DIM]> = all.iter().map(|p| lookup(&p.pair_id)).collect::<anyhow::Result<_>>()?;
    let probs = predict_batch(&model, &xs)?;
    let rows: Vec<PriorCacheRow> = all
        .iter()
        .zip(probs)
        .map(|(p, prior)| PriorCacheRow {
            pair_id: p.pair_id.clone(),
            prior,
        })
        .collect();
    let train_correct = all
        .iter()
        .zip(&rows)
        .take(curated.train.len())
        .filter(|(p, r)| clonegrade::metrics::argmax(&r.prior) == p.label as usize)
        .count();

    std::fs::create_dir_all(&a.out)?;
    model.save(&a.out.join("prior_model.json"))?;
    jsonl::write(&a.out.join("prior.jsonl"), &rows)?;
    manifest.output("prior_model.json");
    manifest.output("prior.jsonl");
    manifest.write(&a.out.join(MANIFEST))?;

    Ok(serde_json::json!({
        "command": "train-prior",
        "kind": config.kind,
        "train_pairs": train.len(),
        "train_accuracy": train_correct as f64 / train.len() as f64,
    }))
}
