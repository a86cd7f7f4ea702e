use std::collections::HashMap;

use anyhow::Context;
use clonegrade::corpus::{PairRecord, Split};
use clonegrade::fusion::{
    load_checkpoint, predict_all, save_checkpoint, train as train_head, FusionSample, ProbabilityDistribution,
};
use clonegrade::jsonl;
use clonegrade::prior::PriorCacheRow;
use clonegrade::semantic::{open_store, pair_semantic_input, EmbeddingStore, SemanticError};
use clonegrade::syntax::{StructuralCacheRow, STRUCTURAL_DIM};
use clonegrade::NUM_CLASSES;
use serde::{Deserialize, Serialize};

use super::{index_by_pair, parse_split, read_rows, require, require_in, CuratedDir, MANIFEST};
use crate::config::FileConfig;
use crate::manifest::{write_json, Manifest};
use crate::{FusionInputs, PredictArgs, TrainFusionArgs};

/// One line of `predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub pair_id: String,
    pub p: [f64; NUM_CLASSES],
    pub prediction: u8,
    pub confidence: f64,
    pub top3: [(u8, f64); 3],
}

impl PredictionRow {
    pub fn new(pair_id: &str, d: &ProbabilityDistribution) -> Self {
        Self {
            pair_id: pair_id.to_string(),
            p: d.p,
            prediction: d.label(),
            confidence: d.confidence,
            top3: d.top3,
        }
    }

    pub fn distribution(&self) -> ProbabilityDistribution {
        ProbabilityDistribution::new(self.p)
    }
}

/// Feature caches and the embedding store, indexed for sample assembly.
struct Inputs {
    curated: CuratedDir,
    structural: HashMap<String, StructuralCacheRow>,
    prior: HashMap<String, PriorCacheRow>,
    store: EmbeddingStore,
}

impl Inputs {
    fn load(i: &FusionInputs, manifest: &mut Manifest) -> anyhow::Result<Self> {
        let curated = CuratedDir::load(&i.curated, manifest)?;
        let structural_path = require_in(&i.features, "structural.jsonl", "--features")?;
        let prior_path = require_in(&i.prior, "prior.jsonl", "--prior")?;
        require(&i.embeddings, "--embeddings")?;
        let structural = index_by_pair(read_rows(&structural_path, manifest)?, |r: &StructuralCacheRow| &r.pair_id, "structural.jsonl")?;
        let prior = index_by_pair(read_rows(&prior_path, manifest)?, |r: &PriorCacheRow| &r.pair_id, "prior.jsonl")?;
        manifest.input(&i.embeddings)?;
        let store = open_store(&i.embeddings).with_context(|| i.embeddings.display().to_string())?;
        Ok(Self {
            curated,
            structural,
            prior,
            store,
        })
    }

    /// `Ok(None)` when either fragment has no embedding: such pairs are
    /// skipped and reported rather than failing the run.
    fn sample(&self, p: &PairRecord) -> anyhow::Result<Option<FusionSample>> {
        let s = self
            .structural
            .get(&p.pair_id)
            .ok_or_else(|| anyhow::anyhow!("structural.jsonl has no row for pair {}", p.pair_id))?;
        let v: [f64; STRUCTURAL_DIM] = s
            .structural
            .as_slice()
            .try_into()
            .map_err(|_| anyhow::anyhow!("structural row {} has {} values", p.pair_id, s.structural.len()))?;
        let prior = self
            .prior
            .get(&p.pair_id)
            .ok_or_else(|| anyhow::anyhow!("prior.jsonl has no row for pair {}", p.pair_id))?;
        let embedding = |id: &str| match self.store.get(id) {
            Ok(e) => Ok(Some(e)),
            Err(SemanticError::NotFound(_)) => Ok(None),
            Err(e) => Err(anyhow::Error::new(e).context(format!("pair {}", p.pair_id))),
        };
        let (Some(left), Some(right)) = (embedding(&p.left)?, embedding(&p.right)?) else {
            return Ok(None);
        };
        let h = pair_semantic_input(&left, &right)?;
        Ok(Some(FusionSample {
            pair_id: p.pair_id.clone(),
            h: h.into_iter().map(f64::from).collect(),
            s: prior.prior,
            v,
            label: Some(p.label),
        }))
    }

    /// Samples of `split` plus the ids of pairs skipped for lack of an embedding.
    fn samples(&self, split: Split) -> anyhow::Result<(Vec<FusionSample>, Vec<String>)> {
        let mut kept = Vec::new();
        let mut skipped = Vec::new();
        for p in self.curated.split(split) {
            match self.sample(p)? {
                Some(s) => kept.push(s),
                None => skipped.push(p.pair_id.clone()),
            }
        }
        Ok((kept, skipped))
    }
}

pub(super) fn train(a: &TrainFusionArgs, cfg: &FileConfig) -> anyhow::Result<serde_json::Value> {
    let mut config = cfg.fusion_config()?;
    config.seed = cfg.seed(a.seed, cfg.fusion.as_ref())?;
    macro_rules! flag {
        ($($f:ident),*) => {$(if let Some(v) = a.$f { config.$f = v; })*};
    }
    flag!(epochs, batch_size, learning_rate, warmup_steps, weight_decay, label_smoothing, d_k, hidden);
    config.validate().map_err(|e| crate::UsageError(e.to_string()))?;

    let mut manifest = Manifest::new("train-fusion");
    manifest.config(&config)?;
    let inputs = Inputs::load(&a.inputs, &mut manifest)?;
    let (train_set, skipped_train) = inputs.samples(Split::Train)?;
    let (validation, skipped_validation) = inputs.samples(Split::Validation)?;

    let dir = &a.out;
    std::fs::create_dir_all(dir.join("checkpoints"))?;
    let mut saved = Vec::new();
    let outcome = train_head(&train_set, &validation, &config, |log, params| {
        let name = format!("checkpoints/epoch_{:03}.tfck", log.epoch);
        save_checkpoint(&dir.join(&name), params, log.step)?;
        saved.push(name);
        Ok(())
    })?;
    let final_step = outcome.steps.len();
    save_checkpoint(&dir.join("model.tfck"), &outcome.params, final_step)?;
    jsonl::write(&dir.join("steps.jsonl"), &outcome.steps)?;
    jsonl::write(&dir.join("epochs.jsonl"), &outcome.epochs)?;
    write_json(
        &dir.join("skipped_pairs.json"),
        &serde_json::json!({ "train": skipped_train, "validation": skipped_validation }),
    )?;
    for f in saved {
        manifest.output(f);
    }
    for f in ["model.tfck", "steps.jsonl", "epochs.jsonl", "skipped_pairs.json"] {
        manifest.output(f);
    }
    manifest.write(&dir.join(MANIFEST))?;

    let last = outcome.epochs.last();
    Ok(serde_json::json!({
        "command": "train-fusion",
        "train_pairs": train_set.len(),
        "skipped_missing_embedding": skipped_train.len() + skipped_validation.len(),
        "steps": final_step,
        "final_loss": last.map(|e| e.loss),
        "train_accuracy": last.map(|e| e.train_accuracy),
        "val_macro_f1": last.and_then(|e| e.val_macro_f1),
    }))
}

pub(super) fn predict(a: &PredictArgs) -> anyhow::Result<serde_json::Value> {
    require(&a.checkpoint, "--checkpoint")?;
    let split = parse_split(&a.split)?;
    let mut manifest = Manifest::new("predict");
    manifest.input(&a.checkpoint)?;
    let (params, step) = load_checkpoint(&a.checkpoint).with_context(|| a.checkpoint.display().to_string())?;
    manifest.config(serde_json::json!({ "split": split, "checkpoint_step": step }))?;
    let inputs = Inputs::load(&a.inputs, &mut manifest)?;
    let (samples, skipped) = inputs.samples(split)?;
    if let Some(s) = samples.first() {
        anyhow::ensure!(
            s.h.len() == params.d,
            "checkpoint expects pair embeddings of width {}, store gives {}",
            params.d,
            s.h.len()
        );
    }
    let dists = predict_all(&samples, &params)?;
    let rows: Vec<PredictionRow> = samples.iter().zip(&dists).map(|(s, d)| PredictionRow::new(&s.pair_id, d)).collect();
    jsonl::write(&a.out.join("predictions.jsonl"), &rows)?;
    write_json(&a.out.join("skipped_pairs.json"), &skipped)?;
    manifest.output("predictions.jsonl");
    manifest.output("skipped_pairs.json");
    manifest.write(&a.out.join(MANIFEST))?;

    let correct = samples.iter().zip(&rows).filter(|(s, r)| s.label == Some(r.prediction)).count();
    Ok(serde_json::json!({
        "command": "predict",
        "split": split,
        "pairs": rows.len(),
        "skipped_missing_embedding": skipped.len(),
        "accuracy": if rows.is_empty() { 0.0 } else { correct as f64 / rows.len() as f64 },
    }))
}
