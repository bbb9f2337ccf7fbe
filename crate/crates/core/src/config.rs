//! Run configuration file: TOML with `[model]`, `[train]` and `[segment]`
//! sections plus a single top-level `seed`.
//!
//! ```toml
//! seed = 7
//! corpus = "data/corpus.jsonl"
//!
//! [model]
//! latent_width = 512
//! depth = 8
//!
//! [train]
//! learning_rate = 3e-5
//! loss_convention = "prose_consistent"
//! schedule = { kind = "linear", final_multiplier = 0.1 }
//!
//! [segment]
//! window_s = 60.0
//! ```
//!
//! Every key is optional and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::SegmentConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Corpus file used when none is given on the command line.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub segment: SegmentConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        for section in ["model", "train"] {
            if raw.get(section).and_then(|s| s.get("seed")).is_some() {
                return Err(Error::config(format!(
                    "`{section}.seed` is not configurable; set the top-level `seed`"
                )));
            }
        }
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let (Some(c), Some(dir)) = (&cfg.corpus, path.parent()) {
            if c.is_relative() {
                cfg.corpus = Some(dir.join(c));
            }
        }
        Ok(cfg)
    }

    /// Routes the single seed to every consumer.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.segment.validate()
    }

    pub fn to_toml(&self) -> String {
        let mut v = toml::Table::try_from(self).expect("config serializes");
        for section in ["model", "train"] {
            if let Some(toml::Value::Table(t)) = v.get_mut(section) {
                t.remove("seed");
            }
        }
        toml::to_string(&v).expect("config serializes")
    }
}
