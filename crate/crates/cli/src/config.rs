//! TOML run configuration. Every key is optional; the resolved value of a
//! setting is the flag if given, else the config file, else the default.

use std::path::Path;

use clonegrade::fusion::FusionConfig;
use clonegrade::prior::PriorConfig;
use serde::Deserialize;

use crate::UsageError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub curate: CurateSection,
    /// Kept raw so a section-level `seed` can be checked against the
    /// top-level one before conversion.
    pub prior: Option<toml::Table>,
    pub fusion: Option<toml::Table>,
    #[serde(default)]
    pub arbiter: ArbiterSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurateSection {
    pub seed: Option<u64>,
    pub train_cap_0: Option<usize>,
    pub train_cap_6: Option<usize>,
    pub val_target: Option<usize>,
    pub min_chars: Option<usize>,
    pub diversity: Option<bool>,
    pub diversity_bins: Option<usize>,
}

/// No credential field: the key is read from the environment only.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArbiterSection {
    pub policy: Option<String>,
    pub tau: Option<f64>,
    pub url: Option<String>,
    pub model: Option<String>,
    pub mock: Option<String>,
    pub retries: Option<usize>,
    pub max_in_flight: Option<usize>,
    pub per_minute: Option<u32>,
    pub timeout_secs: Option<u64>,
    pub max_code_chars: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    pub bins: Option<Vec<f64>>,
    pub resamples: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("--config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| UsageError(format!("--config {}: {e}", path.display())).into())
    }

    /// `flag > top-level seed > section seed`; a section seed that disagrees
    /// with the top-level one is a conflict.
    pub fn seed(&self, flag: Option<u64>, section: Option<&toml::Table>) -> anyhow::Result<u64> {
        let section_seed = match section.and_then(|t| t.get("seed")) {
            Some(v) => Some(
                v.as_integer()
                    .and_then(|i| u64::try_from(i).ok())
                    .ok_or_else(|| UsageError("config: section seed must be a non-negative integer".into()))?,
            ),
            None => None,
        };
        self.resolve_seed(flag, section_seed)
    }

    pub fn resolve_seed(&self, flag: Option<u64>, section_seed: Option<u64>) -> anyhow::Result<u64> {
        if let (Some(a), Some(b)) = (self.seed, section_seed) {
            if a != b {
                return Err(UsageError(format!("config conflict: top-level seed {a} vs section seed {b}")).into());
            }
        }
        flag.or(self.seed)
            .or(section_seed)
            .ok_or_else(|| UsageError("--seed is required (flag or `seed` in the config file)".into()).into())
    }

    pub fn prior_config(&self) -> anyhow::Result<PriorConfig> {
        section(self.prior.as_ref(), "prior")
    }

    pub fn fusion_config(&self) -> anyhow::Result<FusionConfig> {
        section(self.fusion.as_ref(), "fusion")
    }
}

fn section<T: for<'de> Deserialize<'de> + Default>(table: Option<&toml::Table>, name: &str) -> anyhow::Result<T> {
    match table {
        None => Ok(T::default()),
        Some(t) => t
            .clone()
            .try_into()
            .map_err(|e| UsageError(format!("config [{name}]: {e}")).into()),
    }
}
