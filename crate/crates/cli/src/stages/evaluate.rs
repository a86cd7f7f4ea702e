use std::collections::{BTreeMap, HashMap};

use clonegrade::arbiter::DecisionLogRow;
use clonegrade::corpus::PairRecord;
use clonegrade::metrics::{
    build_report, compare_policies, confusion_csv, validate_edges, EvalInput, EvalReport,
    DEFAULT_BOOTSTRAP_RESAMPLES,
};
use clonegrade::NUM_CLASSES;
use serde::Serialize;

use super::{read_rows, require, PredictionRow};
use crate::config::FileConfig;
use crate::manifest::{sibling_manifest, write_json, Manifest};
use crate::{EvaluateArgs, UsageError};

const DEFAULT_BINS: [f64; 4] = [0.0, 0.6, 0.8, 1.0];

#[derive(Debug, Serialize)]
struct Resolved {
    seed: u64,
    bins: Vec<f64>,
    resamples: usize,
}

#[derive(Debug, Serialize)]
struct DecisionStats {
    triggered: usize,
    changed: usize,
    fallbacks: usize,
    arbitration_fraction: f64,
}

#[derive(Debug, Serialize)]
struct Report {
    /// "decisions" (final labels after arbitration) or "predictions"
    scored: &'static str,
    #[serde(flatten)]
    metrics: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    arbitration: Option<DecisionStats>,
}

fn parse_bins(s: &str) -> anyhow::Result<Vec<f64>> {
    let edges = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| UsageError(format!("--bins {s:?}: {e}")))?;
    validate_edges(&edges).map_err(|e| UsageError(format!("--bins {s:?}: {e}")))?;
    Ok(edges)
}

pub(super) fn run(a: &EvaluateArgs, cfg: &FileConfig) -> anyhow::Result<serde_json::Value> {
    if a.decisions.is_none() && a.predictions.is_none() {
        return Err(UsageError("evaluate needs --decisions, --predictions or both".into()).into());
    }
    let e = &cfg.evaluate;
    let bins = match (&a.bins, &e.bins) {
        (Some(s), _) => parse_bins(s)?,
        (None, Some(b)) => {
            validate_edges(b).map_err(|err| UsageError(format!("config [evaluate] bins: {err}")))?;
            b.clone()
        }
        (None, None) => DEFAULT_BINS.to_vec(),
    };
    let r = Resolved {
        seed: cfg.seed(a.seed, None)?,
        bins,
        resamples: a.resamples.or(e.resamples).unwrap_or(DEFAULT_BOOTSTRAP_RESAMPLES),
    };
    for t in &a.truths {
        require(t, "--truths")?;
    }
    for p in a.decisions.iter().chain(&a.predictions) {
        require(p, if Some(p) == a.decisions.as_ref() { "--decisions" } else { "--predictions" })?;
    }

    let mut manifest = Manifest::new("evaluate");
    manifest.config(&r)?;
    let mut truth: HashMap<String, u8> = HashMap::new();
    for t in &a.truths {
        for p in read_rows::<PairRecord>(t, &mut manifest)? {
            p.validate()?;
            if let Some(prev) = truth.insert(p.pair_id.clone(), p.label) {
                anyhow::ensure!(prev == p.label, "pair {} has conflicting truths", p.pair_id);
            }
        }
    }
    let decisions: Option<Vec<DecisionLogRow>> = a.decisions.as_ref().map(|p| read_rows(p, &mut manifest)).transpose()?;
    let predictions: Option<Vec<PredictionRow>> =
        a.predictions.as_ref().map(|p| read_rows(p, &mut manifest)).transpose()?;

    // (pair_id, predicted label, confidence) in file order
    let scored: Vec<(&str, u8, f64)> = match (&decisions, &predictions) {
        (Some(d), _) => d.iter().map(|r| (r.pair_id.as_str(), r.final_label, r.confidence)).collect(),
        (None, Some(p)) => p.iter().map(|r| (r.pair_id.as_str(), r.prediction, r.confidence)).collect(),
        (None, None) => unreachable!("checked above"),
    };
    let truths: Vec<u8> = scored
        .iter()
        .map(|(id, _, _)| truth.get(*id).copied().ok_or_else(|| anyhow::anyhow!("no truth for pair {id}")))
        .collect::<anyhow::Result<_>>()?;
    let preds: Vec<u8> = scored.iter().map(|s| s.1).collect();
    let confidences: Vec<f64> = scored.iter().map(|s| s.2).collect();
    let distributions: Option<Vec<[f64; NUM_CLASSES]>> = predictions
        .as_ref()
        .map(|rows| {
            let by_id: HashMap<&str, &PredictionRow> = rows.iter().map(|r| (r.pair_id.as_str(), r)).collect();
            scored
                .iter()
                .map(|(id, _, _)| {
                    by_id
                        .get(id)
                        .map(|r| r.p)
                        .ok_or_else(|| anyhow::anyhow!("--predictions has no row for pair {id}"))
                })
                .collect::<anyhow::Result<Vec<_>>>()
        })
        .transpose()?;

    let mut metrics = build_report(&EvalInput {
        truths: &truths,
        preds: &preds,
        confidences: &confidences,
        distributions: distributions.as_deref(),
        bin_edges: &r.bins,
        resamples: r.resamples,
        seed: r.seed,
    })?;

    let arbitration = match &decisions {
        None => None,
        Some(rows) => {
            let truth_map: BTreeMap<String, u8> = rows.iter().zip(&truths).map(|(d, &t)| (d.pair_id.clone(), t)).collect();
            let base: BTreeMap<String, u8> = rows.iter().map(|d| (d.pair_id.clone(), d.primary)).collect();
            let fin: BTreeMap<String, u8> = rows.iter().map(|d| (d.pair_id.clone(), d.final_label)).collect();
            anyhow::ensure!(base.len() == rows.len(), "--decisions repeats a pair id");
            metrics.policy_comparison = Some(compare_policies(&truth_map, &base, &fin)?);
            let triggered = rows.iter().filter(|d| d.triggered).count();
            Some(DecisionStats {
                triggered,
                changed: rows.iter().filter(|d| d.final_label != d.primary).count(),
                fallbacks: rows.iter().filter(|d| d.fallback_reason.is_some()).count(),
                arbitration_fraction: if rows.is_empty() { 0.0 } else { triggered as f64 / rows.len() as f64 },
            })
        }
    };

    let report = Report {
        scored: if decisions.is_some() { "decisions" } else { "predictions" },
        metrics,
        arbitration,
    };
    write_json(&a.out, &report)?;
    manifest.output(a.out.display().to_string());
    if let Some(csv) = &a.confusion_csv {
        std::fs::write(csv, confusion_csv(&report.metrics.confusion))?;
        manifest.output(csv.display().to_string());
    }
    manifest.write(&sibling_manifest(&a.out))?;

    Ok(serde_json::json!({
        "command": "evaluate",
        "n": report.metrics.n,
        "accuracy": report.metrics.accuracy,
        "macro_f1": report.metrics.macro_avg.f1,
        "weighted_f1": report.metrics.weighted.f1,
    }))
}
