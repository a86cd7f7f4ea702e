use std::path::PathBuf;
use std::time::Duration;

use clonegrade::arbiter::{
    decide_all, summarize, Arbiter, ArbiterRunConfig, ArbitrationItem, HttpArbiter, MockArbiter, PromptConfig,
    TriggerMode, TriggerPolicy, API_KEY_ENV, DEFAULT_MAX_IN_FLIGHT, DEFAULT_RETRIES, DEFAULT_TAU,
};
use clonegrade::fusion::ProbabilityDistribution;
use clonegrade::jsonl;
use serde::Serialize;

use super::{read_rows, require, CuratedDir, PredictionRow, MANIFEST};
use crate::config::FileConfig;
use crate::manifest::{write_json, Manifest};
use crate::{ArbitrateArgs, UsageError};

const DEFAULT_TIMEOUT_SECS: u64 = 60;

#[derive(Debug, Serialize)]
#[serde(rename_all = "snake_case")]
enum Source {
    /// Policy `off`: nothing is ever escalated.
    None,
    Mock(PathBuf),
    Http { url: String, model: String, timeout_secs: u64 },
}

#[derive(Debug, Serialize)]
struct Resolved {
    policy: TriggerPolicy,
    source: Source,
    retries: usize,
    max_in_flight: usize,
    per_minute: Option<u32>,
    max_code_chars: usize,
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Flags and config each name at most one arbiter; a flag-level choice
/// shadows the config's.
fn resolve_source(a: &ArbitrateArgs, cfg: &FileConfig, mode: TriggerMode) -> anyhow::Result<Source> {
    let c = &cfg.arbiter;
    let (mock, url) = match (&a.mock, &a.arbiter_url) {
        (Some(_), Some(_)) => return Err(usage("--mock and --arbiter-url are mutually exclusive")),
        (None, None) => match (&c.mock, &c.url) {
            (Some(_), Some(_)) => return Err(usage("config conflict: [arbiter] sets both mock and url")),
            (m, u) => (m.as_ref().map(PathBuf::from), u.clone()),
        },
        (m, u) => (m.clone(), u.clone()),
    };
    let timeout_secs = a.timeout_secs.or(c.timeout_secs).unwrap_or(DEFAULT_TIMEOUT_SECS);
    match (mock, url) {
        (Some(path), _) => {
            require(&path, "--mock")?;
            Ok(Source::Mock(path))
        }
        (None, Some(url)) => {
            let model = a
                .model
                .clone()
                .or_else(|| c.model.clone())
                .ok_or_else(|| usage("--model is required with --arbiter-url"))?;
            Ok(Source::Http { url, model, timeout_secs })
        }
        (None, None) if mode == TriggerMode::Off => Ok(Source::None),
        (None, None) => Err(usage("an arbiter is required: pass --mock FILE or --arbiter-url URL (or --policy off)")),
    }
}

pub(super) fn run(a: &ArbitrateArgs, cfg: &FileConfig) -> anyhow::Result<serde_json::Value> {
    require(&a.predictions, "--predictions")?;
    let c = &cfg.arbiter;
    let mode: TriggerMode = a
        .policy
        .as_deref()
        .or(c.policy.as_deref())
        .map(str::parse)
        .transpose()
        .map_err(|e| usage(format!("--policy: {e}")))?
        .unwrap_or_default();
    let policy =
        TriggerPolicy::new(mode, a.tau.or(c.tau).unwrap_or(DEFAULT_TAU)).map_err(|e| usage(format!("--tau: {e}")))?;
    let r = Resolved {
        source: resolve_source(a, cfg, mode)?,
        policy,
        retries: a.retries.or(c.retries).unwrap_or(DEFAULT_RETRIES),
        max_in_flight: a.max_in_flight.or(c.max_in_flight).unwrap_or(DEFAULT_MAX_IN_FLIGHT),
        per_minute: a.per_minute.or(c.per_minute),
        max_code_chars: c.max_code_chars.unwrap_or(PromptConfig::default().max_code_chars),
    };

    let mut manifest = Manifest::new("arbitrate");
    manifest.config(&r)?;
    let predictions: Vec<PredictionRow> = read_rows(&a.predictions, &mut manifest)?;
    let curated = CuratedDir::load(&a.curated, &mut manifest)?;
    let arbiter: Box<dyn Arbiter> = match &r.source {
        Source::None => Box::new(MockArbiter::default()),
        Source::Mock(path) => {
            manifest.input(path)?;
            Box::new(MockArbiter::load(path)?)
        }
        Source::Http { url, model, timeout_secs } => Box::new(HttpArbiter::from_env(
            url.clone(),
            model.clone(),
            API_KEY_ENV,
            Duration::from_secs(*timeout_secs),
        )),
    };

    let sources = curated.sources();
    let pairs: std::collections::HashMap<&str, _> =
        curated.all_pairs().map(|p| (p.pair_id.as_str(), p)).collect();
    let dists: Vec<ProbabilityDistribution> = predictions.iter().map(PredictionRow::distribution).collect();
    let items = predictions
        .iter()
        .zip(&dists)
        .map(|(row, d)| {
            let pair = pairs
                .get(row.pair_id.as_str())
                .ok_or_else(|| anyhow::anyhow!("prediction for unknown pair {}", row.pair_id))?;
            let code = |id: &str| {
                sources
                    .get(id)
                    .copied()
                    .ok_or_else(|| anyhow::anyhow!("pair {} references unknown fragment {id}", row.pair_id))
            };
            Ok(ArbitrationItem {
                pair_id: &row.pair_id,
                code_left: code(&pair.left)?,
                code_right: code(&pair.right)?,
                distribution: d,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;

    let run_cfg = ArbiterRunConfig {
        retries: r.retries,
        max_in_flight: r.max_in_flight,
        per_minute: r.per_minute,
        prompt: PromptConfig {
            max_code_chars: r.max_code_chars,
        },
    };
    let decisions = decide_all(&items, &r.policy, arbiter.as_ref(), &run_cfg)?;
    let summary = summarize(&decisions);

    let dir = &a.out;
    let log: Vec<_> = decisions.iter().map(|d| d.log_row()).collect();
    jsonl::write(&dir.join("decisions.jsonl"), &log)?;
    jsonl::write(&dir.join("decisions_detail.jsonl"), &decisions)?;
    write_json(&dir.join("arbitration_summary.json"), &summary)?;
    for f in ["decisions.jsonl", "decisions_detail.jsonl", "arbitration_summary.json"] {
        manifest.output(f);
    }
    manifest.write(&dir.join(MANIFEST))?;

    Ok(serde_json::json!({
        "command": "arbitrate",
        "pairs": summary.total,
        "triggered": summary.triggered,
        "changed": summary.changed,
        "fallbacks": summary.fallbacks,
    }))
}
