//! One JSON file configures a whole run, namespaced by component.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::data::{SplitSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub synthetic: SyntheticSpec,
    pub split: SplitSpec,
    /// Holds `train.jsonl`, `valid.jsonl` and `test.jsonl`.
    pub dir: PathBuf,
    /// Fraction of malformed lines tolerated when loading.
    pub tolerance: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticSpec::default(),
            split: SplitSpec::default(),
            dir: PathBuf::from("data"),
            tolerance: 0.0,
        }
    }
}

impl DataConfig {
    pub fn train_path(&self) -> PathBuf {
        self.dir.join("train.jsonl")
    }

    pub fn valid_path(&self) -> PathBuf {
        self.dir.join("valid.jsonl")
    }

    pub fn test_path(&self) -> PathBuf {
        self.dir.join("test.jsonl")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub serve: ServeConfig,
    pub bench: BenchConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// Sets every seed in the run from one value.
    pub fn override_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.data.synthetic.seed = seed;
        self.bench.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.synthetic.validate()?;
        if !(0.0..=1.0).contains(&self.data.tolerance) {
            return Err(Error::config("data.tolerance must lie in [0, 1]"));
        }
        let s = self.data.split;
        if s.train < 0.0 || s.valid < 0.0 || s.train + s.valid > 1.0 {
            return Err(Error::config("data.split fractions must be nonnegative and sum to at most 1"));
        }
        Ok(())
    }
}
