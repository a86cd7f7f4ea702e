use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clonegrade::corpus::{FragmentRecord, PairRecord, Split};
use clonegrade::jsonl;
use serde::de::DeserializeOwned;

use crate::config::FileConfig;
use crate::manifest::Manifest;
use crate::{Cli, Command, UsageError};

mod arbitrate;
mod curate;
mod evaluate;
mod featurize;
mod fusion;
mod import;
mod prior;

pub use fusion::PredictionRow;

pub(crate) const MANIFEST: &str = "manifest.json";

/// Runs the parsed command; returns a one-line JSON summary for stdout.
pub fn execute(cli: &Cli) -> anyhow::Result<serde_json::Value> {
    let cfg = FileConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Curate(a) => curate::run(a, &cfg),
        Command::Featurize(a) => featurize::run(a),
        Command::ImportEmbeddings(a) => import::run(a),
        Command::TrainPrior(a) => prior::run(a, &cfg),
        Command::TrainFusion(a) => fusion::train(a, &cfg),
        Command::Predict(a) => fusion::predict(a),
        Command::Arbitrate(a) => arbitrate::run(a, &cfg),
        Command::Evaluate(a) => evaluate::run(a, &cfg),
    }
}

/// Fails with a usage error naming `flag` unless `path` exists.
pub(crate) fn require(path: &Path, flag: &str) -> anyhow::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(UsageError(format!("{flag}: {} does not exist", path.display())).into())
    }
}

/// Like [`require`] for a file expected inside a directory given by `flag`.
pub(crate) fn require_in(dir: &Path, name: &str, flag: &str) -> anyhow::Result<PathBuf> {
    let p = dir.join(name);
    require(&p, flag)?;
    Ok(p)
}

pub(crate) fn read_rows<T: DeserializeOwned>(path: &Path, manifest: &mut Manifest) -> anyhow::Result<Vec<T>> {
    manifest.input(path)?;
    jsonl::read(path).with_context(|| format!("reading {}", path.display()))
}

/// The split files written by `curate`.
pub(crate) struct CuratedDir {
    pub fragments: Vec<FragmentRecord>,
    pub train: Vec<PairRecord>,
    pub validation: Vec<PairRecord>,
    pub test: Vec<PairRecord>,
}

impl CuratedDir {
    pub fn load(dir: &Path, manifest: &mut Manifest) -> anyhow::Result<Self> {
        require(dir, "--curated")?;
        let mut split = |name: &str| -> anyhow::Result<Vec<PairRecord>> {
            let rows: Vec<PairRecord> = read_rows(&require_in(dir, name, "--curated")?, manifest)?;
            for p in &rows {
                p.validate()?;
            }
            Ok(rows)
        };
        let (train, validation, test) = (split("train.jsonl")?, split("validation.jsonl")?, split("test.jsonl")?);
        let fragments = read_rows(&require_in(dir, "fragments.jsonl", "--curated")?, manifest)?;
        Ok(Self {
            fragments,
            train,
            validation,
            test,
        })
    }

    pub fn split(&self, s: Split) -> &[PairRecord] {
        match s {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
            Split::Unassigned => &[],
        }
    }

    /// Every pair, in train, validation, test order.
    pub fn all_pairs(&self) -> impl Iterator<Item = &PairRecord> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }

    pub fn sources(&self) -> HashMap<&str, &str> {
        self.fragments
            .iter()
            .map(|f| (f.fragment_id.as_str(), f.source.as_str()))
            .collect()
    }
}

pub(crate) fn parse_split(s: &str) -> anyhow::Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "validation" => Ok(Split::Validation),
        "test" => Ok(Split::Test),
        other => Err(UsageError(format!("--split: expected train, validation or test, got {other:?}")).into()),
    }
}

/// Rows of a pair-keyed cache, indexed by pair id; duplicates are an error.
pub(crate) fn index_by_pair<T>(rows: Vec<T>, key: impl Fn(&T) -> &str, what: &str) -> anyhow::Result<HashMap<String, T>> {
    let mut out = HashMap::with_capacity(rows.len());
    for r in rows {
        let k = key(&r).to_string();
        if out.contains_key(&k) {
            anyhow::bail!("{what}: duplicate pair_id {k}");
        }
        out.insert(k, r);
    }
    Ok(out)
}
