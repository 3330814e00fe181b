//! Run configuration: one JSON document with a section per component.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::DataConfig;
use crate::error::{Error, Result};
use crate::eval::{EfficiencyModel, EvalProtocol, DEFAULT_SWEEP_PROMPTS, DEFAULT_SWEEP_SIZES};
use crate::nn::ModelConfig;
use crate::train::TrainConfig;

pub const SNAPSHOT_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    #[serde(rename = "L")]
    pub sizes: Vec<usize>,
    #[serde(rename = "P")]
    pub prompts: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { sizes: DEFAULT_SWEEP_SIZES.to_vec(), prompts: DEFAULT_SWEEP_PROMPTS.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, overrides the data, train and eval seeds.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalProtocol,
    pub sweep: SweepConfig,
    pub efficiency: EfficiencyModel,
}

/// Turns a deserialization failure into an error naming the dotted key.
fn schema_error(e: serde_path_to_error::Error<serde_json::Error>) -> Error {
    let path = e.path().to_string();
    let inner = e.into_inner();
    let msg = inner.to_string();
    let mut key = if path == "." { String::new() } else { path };
    if key.is_empty() {
        key = msg.strip_prefix("unknown field `").and_then(|r| r.split('`').next()).unwrap_or("<root>").to_string();
    }
    Error::InvalidConfig { key, reason: msg }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(schema_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.efficiency.validate()?;
        if self.sweep.sizes.iter().chain(&self.sweep.prompts).any(|&v| v == 0) || self.sweep.sizes.is_empty() || self.sweep.prompts.is_empty() {
            return Err(Error::config("sweep", "L and P lists must be non-empty and positive"));
        }
        if self.model.input_shape != self.data.shape {
            return Err(Error::config("model.input_shape", format!("{:?} differs from data.shape {:?}", self.model.input_shape, self.data.shape)));
        }
        Ok(())
    }

    /// Applies the global seed and output directory.
    pub fn resolve(mut self, seed: Option<u64>, out: &Path) -> Result<Self> {
        if seed.is_some() {
            self.seed = seed;
        }
        if let Some(s) = self.seed {
            self.data.seed = s;
            self.train.seed = s;
            self.eval.seed = s;
        }
        self.out = Some(out.to_path_buf());
        self.validate()?;
        Ok(self)
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(SNAPSHOT_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Json { path: path.clone(), source: e })?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(text: &str) -> String {
        match RunConfig::from_json(text).unwrap_err() {
            Error::InvalidConfig { key, .. } => key,
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_document_is_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn errors_name_the_offending_key() {
        assert_eq!(key_of(r#"{"train": {"lr": 0.1}}"#), "train.lr");
        assert_eq!(key_of(r#"{"bogus": 1}"#), "bogus");
        assert_eq!(key_of(r#"{"train": {"steps": "many"}}"#), "train.steps");
        assert_eq!(key_of(r#"{"model": {"prompt_type": "lasso"}}"#), "model.prompt_type");
        assert_eq!(key_of(r#"{"eval": {"n_runs": 0}}"#), "eval.n_runs");
        assert_eq!(key_of(r#"{"data": {"shape": [16, 16, 16]}}"#), "model.input_shape");
    }

    #[test]
    fn aliases_are_accepted() {
        let c = RunConfig::from_json(r#"{"train": {"L_range": [2, 4], "P_range": [1, 1]}}"#).unwrap();
        assert_eq!((c.train.context_range, c.train.prompts_range), ((2, 4), (1, 1)));
    }

    #[test]
    fn snapshot_round_trips_and_seed_propagates() {
        let dir = tempfile::tempdir().unwrap();
        let c = RunConfig::default().resolve(Some(42), dir.path()).unwrap();
        assert_eq!((c.data.seed, c.train.seed, c.eval.seed), (42, 42, 42));
        let path = c.write_snapshot(dir.path()).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), c);
    }
}
