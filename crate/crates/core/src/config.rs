//! One configuration tree for every command, with dotted-key overrides.
//!
//! The file format is JSON; missing keys take their defaults. Every leaf is
//! addressable as `section.field` (or `train.mask.random_ratio`), and
//! [`RunConfig::set`] rejects keys that do not exist.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::benchmark::EvalOptions;
use crate::diffusion::SamplerConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricConfig;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

/// What `train` draws batches from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainingSource {
    /// Fresh poses, backgrounds and masks for the dataset's figures on every draw.
    #[default]
    Procedural,
    /// Only the pairs stored under `train/`.
    Pairs,
}

/// Dataset generation sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training pairs, one per figure.
    pub figures: usize,
    pub benchmark_groups: usize,
    pub seed: u64,
    pub training: TrainingSource,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { figures: 200, benchmark_groups: 20, seed: 0, training: TrainingSource::Procedural }
    }
}

/// Evaluation switches that are not sampler or metric settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    pub max_references: Option<usize>,
    pub drop_references: bool,
    pub workers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub metrics: MetricConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io("reading config", path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), detail: e.to_string() })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        self.metrics.validate()
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            sampler: self.sampler.clone(),
            metrics: self.metrics.clone(),
            seed: self.eval.seed,
            max_references: self.eval.max_references,
            drop_references: self.eval.drop_references,
            workers: self.eval.workers,
        }
    }

    /// Applies `key=value`. Values are read as JSON when they parse as JSON
    /// and as plain strings otherwise; `1,2` is accepted for list keys.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment.split_once('=').ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim();
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        let slot = key
            .split('.')
            .try_fold(&mut tree, |node, part| node.as_object_mut().and_then(|o| o.get_mut(part)))
            .filter(|v| !v.is_object())
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}; run with --help to list keys")))?;
        let value = match serde_json::from_str::<Value>(raw.trim()) {
            Ok(v) => v,
            Err(_) if slot.is_array() => serde_json::from_str(&format!("[{raw}]")).map_err(|e| Error::Config(format!("{key}: {e}")))?,
            Err(_) => Value::String(raw.to_string()),
        };
        *slot = value;
        *self = serde_json::from_value(tree).map_err(|e| Error::Config(format!("{key}={raw}: {e}")))?;
        Ok(())
    }

    /// Every settable key with its current value, sorted.
    pub fn keys(&self) -> Vec<(String, String)> {
        fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
            match v {
                Value::Object(map) => {
                    for (k, child) in map {
                        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                        walk(&key, child, out);
                    }
                }
                leaf => out.push((prefix.to_string(), leaf.to_string())),
            }
        }
        let mut out = Vec::new();
        walk("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }
}
