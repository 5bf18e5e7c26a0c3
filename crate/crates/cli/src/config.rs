//! Run configuration: one JSON document covering every stage of a run.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use pixelfool::analytics::AnalysisConfig;
use pixelfool::classifier::TrainParams;
use pixelfool::dataset::{CorpusConfig, NormalizationSpec};
use pixelfool::oracle::{DefenseConfig, Scenario};
use pixelfool::ppo::PpoConfig;

pub const DEFAULT_MASTER_SEED: u64 = 42;

/// Every field is optional in the file; missing ones take their defaults.
///
/// Component seeds are not read from the nested sections: they are derived
/// from `master_seed` (corpus, classifier and attacker use it directly,
/// environment `i` uses `master_seed + i`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub classifier: TrainParams,
    pub normalization: NormalizationSpec,
    pub scenario: Scenario,
    pub defense: DefenseConfig,
    pub ppo: PpoConfig,
    pub analysis: AnalysisConfig,
    pub output_dir: PathBuf,
    pub master_seed: u64,
    /// Write the attacker checkpoint every this many update phases (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            corpus: CorpusConfig::default(),
            classifier: TrainParams::default(),
            normalization: NormalizationSpec::default(),
            scenario: Scenario::TrueDistribution,
            defense: DefenseConfig::default(),
            ppo: PpoConfig::default(),
            analysis: AnalysisConfig::default(),
            output_dir: PathBuf::from("runs"),
            master_seed: DEFAULT_MASTER_SEED,
            checkpoint_every: 10,
        };
        cfg.derive_seeds();
        cfg
    }
}

impl RunConfig {
    /// Parses a JSON config, naming the offending field on failure.
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            anyhow::anyhow!("config field `{path}`: {}", e.into_inner())
        })?;
        cfg.derive_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn derive_seeds(&mut self) {
        let m = self.master_seed;
        self.corpus.seed = m;
        self.classifier.seed = m;
        self.ppo.seed = m;
        self.ppo.env_seeds = (0..self.ppo.num_envs as u64)
            .map(|i| m.wrapping_add(i))
            .collect();
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.corpus.validate()?;
        self.classifier.validate()?;
        self.normalization.validate()?;
        self.defense.validate()?;
        self.ppo.validate()?;
        self.analysis.validate()?;
        if self.output_dir.as_os_str().is_empty() {
            bail!("output_dir must not be empty");
        }
        Ok(())
    }
}
