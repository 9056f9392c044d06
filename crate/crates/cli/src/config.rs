//! Versioned JSON run configuration shared by every subcommand.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tabnsa::data::{Task, TaskHint};
use tabnsa::hyperopt::{SearchSpace, TrialRecord};
use tabnsa::model::{Fusion, ModelConfig};
use tabnsa::nsa::NsaConfig;
use tabnsa::training::{OptimizerKind, TrainConfig};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

/// Model settings that do not depend on the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub nsa: NsaConfig,
    pub hidden_head: usize,
    pub num_blocks: usize,
    pub fusion: Fusion,
    pub feature_id_embedding: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let m = ModelConfig::new(1, Task::Regression);
        ModelSpec {
            nsa: m.nsa,
            hidden_head: m.hidden_head,
            num_blocks: m.num_blocks,
            fusion: m.fusion,
            feature_id_embedding: m.feature_id_embedding,
        }
    }
}

impl ModelSpec {
    pub fn build(&self, num_tokens: usize, task: Task) -> ModelConfig {
        ModelConfig {
            nsa: self.nsa.clone(),
            num_tokens,
            task,
            hidden_head: self.hidden_head,
            num_blocks: self.num_blocks,
            fusion: self.fusion,
            feature_id_embedding: self.feature_id_embedding,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub target: Option<String>,
    pub task: TaskHint,
    pub seeds: Vec<u64>,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub space: SearchSpace,
    pub budget: usize,
    pub overlap: f64,
    /// Feature count for `flops` when no CSV is given.
    pub tokens: Option<usize>,
    /// Class count for `flops`; regression when absent and no CSV is given.
    pub classes: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            target: None,
            task: TaskHint::Auto,
            seeds: vec![0],
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            space: SearchSpace::default(),
            budget: 50,
            overlap: 0.5,
            tokens: None,
            classes: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        if cfg.version != CONFIG_VERSION {
            return Err(CliError::Usage(format!(
                "config {}: version {} is not supported (expected {CONFIG_VERSION})",
                path.display(),
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| CliError::Usage(m);
        if self.seeds.is_empty() {
            return Err(usage("seeds: at least one seed is required".into()));
        }
        if self.budget == 0 {
            return Err(usage("budget: must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(usage(format!("overlap: {} is outside [0, 1]", self.overlap)));
        }
        if self.model.num_blocks == 0 {
            return Err(usage("model.num_blocks: must be at least 1".into()));
        }
        if self.model.hidden_head == 0 {
            return Err(usage("model.hidden_head: must be at least 1".into()));
        }
        self.model.nsa.validate().map_err(|e| usage(format!("model.nsa: {e}")))?;
        self.train.validate().map_err(|e| usage(e.to_string()))?;
        self.space.validate().map_err(|e| usage(e.to_string()))?;
        Ok(())
    }

    pub fn target(&self) -> Result<&str, CliError> {
        self.target
            .as_deref()
            .ok_or_else(|| CliError::Usage("no target column: pass --target or set \"target\" in the config".into()))
    }

    /// Copy with a tuned trial's values written in, usable as a config file.
    pub fn with_trial(&self, trial: &TrialRecord) -> RunConfig {
        let mut out = self.clone();
        out.model.nsa = NsaConfig {
            causal: self.model.nsa.causal,
            ..trial.nsa.clone()
        };
        out.train.lr = trial.lr;
        out.train.batch_size = trial.batch_size;
        out
    }
}

/// Command-line values that override config fields.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub target: Option<String>,
    pub seeds: Option<Vec<u64>>,
    pub budget: Option<usize>,
    pub overlap: Option<f64>,
    pub optimizer: Option<OptimizerKind>,
    pub fusion: Option<Fusion>,
    pub causal: bool,
    pub no_feature_ids: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(t) = &self.target {
            cfg.target = Some(t.clone());
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if let Some(b) = self.budget {
            cfg.budget = b;
        }
        if let Some(o) = self.overlap {
            cfg.overlap = o;
        }
        if let Some(o) = self.optimizer {
            cfg.train.optimizer = o;
        }
        if let Some(f) = self.fusion {
            cfg.model.fusion = f;
        }
        if self.causal {
            cfg.model.nsa.causal = true;
        }
        if self.no_feature_ids {
            cfg.model.feature_id_embedding = false;
        }
    }
}

/// Parses `3`, `0,2,5` or the inclusive range `0..9`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        let lo: u64 = a.trim().parse().map_err(|_| format!("bad seed range start '{a}'"))?;
        let hi: u64 = b.trim().parse().map_err(|_| format!("bad seed range end '{b}'"))?;
        if lo > hi {
            return Err(format!("empty seed range {s}"));
        }
        return Ok((lo..=hi).collect());
    }
    let seeds: Vec<u64> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad seed '{p}'")))
        .collect::<Result<_, _>>()?;
    if seeds.is_empty() {
        return Err("no seeds given".into());
    }
    Ok(seeds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("0..9").unwrap().len(), 10);
        assert_eq!(parse_seeds("1..=3").unwrap(), vec![1, 2, 3]);
        assert_eq!(parse_seeds("4, 7").unwrap(), vec![4, 7]);
        assert!(parse_seeds("5..2").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_fields() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"version":1,"train":{"lr":0.01}}"#).unwrap();
        assert_eq!(partial.train.lr, 0.01);
        assert_eq!(partial.train.batch_size, 32);
        assert!(serde_json::from_str::<RunConfig>(r#"{"modle":{}}"#).is_err());
    }
}
