//! Versioned TOML run configuration. Every section is optional.
//!
//! ```toml
//! version = 1
//! seed = 42
//!
//! [synth]
//! classes = 4
//! subject_scale = [0.7, 1.3]
//!
//! [sessions]
//! window_len = 32
//! windows_per_session = 4
//!
//! [model]
//! d_model = 32
//! heads = 2
//! blocks = 1
//!
//! [train]
//! epochs = 50
//! batch_size = 8
//!
//! [split]
//! partition = { kind = "subjects", val = ["s04"], test = ["s05"] }
//!
//! [openset]
//! alphas = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]
//! holdout_fraction = 0.25
//! ```

use std::path::Path;

use hsa_core::data::{SensorSeries, SessionConfig, SplitPlan, SynthConfig};
use hsa_core::encoder::ModelSettings;
use hsa_core::experiment::{ExperimentConfig, NormalizeConfig};
use hsa_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::dataset::Schema;
use crate::error::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub version: Option<u32>,
    /// Drives synthetic data, initialization, shuffling, dropout, latent
    /// sampling and held-out class selection. Overrides `train.seed`.
    pub seed: u64,
    pub schema: Schema,
    pub synth: SynthConfig,
    pub sessions: SessionConfig,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub normalize: NormalizeConfig,
    pub split: Option<SplitPlan>,
    pub openset: OpenSetSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: Some(CONFIG_VERSION),
            seed: 0,
            schema: Schema::default(),
            synth: SynthConfig::default(),
            sessions: SessionConfig::default(),
            model: ModelSettings::default(),
            train: TrainConfig::default(),
            normalize: NormalizeConfig::default(),
            split: None,
            openset: OpenSetSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpenSetSettings {
    pub alphas: Vec<f64>,
    /// Used when `held_out_classes` is empty: this fraction of the classes,
    /// drawn with the run seed, is held out.
    pub holdout_fraction: f64,
    pub held_out_classes: Vec<u32>,
}

impl Default for OpenSetSettings {
    fn default() -> Self {
        Self { alphas: (0..=5).map(|i| i as f64 / 10.0).collect(), holdout_fraction: 0.25, held_out_classes: Vec::new() }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        match cfg.version {
            Some(CONFIG_VERSION) => Ok(cfg),
            Some(v) => Err(Error::Config(format!("unsupported config version {v}, expected {CONFIG_VERSION}"))),
            None => Err(Error::Config(format!("missing `version = {CONFIG_VERSION}`"))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable as TOML")
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            sessions: self.sessions.clone(),
            model: self.model.clone(),
            train: TrainConfig { seed: self.seed, ..self.train.clone() },
            normalize: self.normalize,
        }
    }

    /// Configured plan, or a subject split: last subject for test and the
    /// one before it for validation (with at least three subjects). A
    /// single subject falls back to a 60/20/20 time split.
    pub fn split_plan(&self, series: &[SensorSeries]) -> Result<SplitPlan> {
        if let Some(plan) = &self.split {
            return Ok(plan.clone());
        }
        let subjects: Vec<&str> = series.iter().map(|s| s.subject_id.as_str()).collect();
        Ok(match subjects.as_slice() {
            [] => return Err(Error::Config("dataset has no subjects".into())),
            [_] => SplitPlan { partition: hsa_core::data::Partition::Fraction { val: 0.2, test: 0.2 }, held_out_classes: Vec::new() },
            [_, last] => SplitPlan::subjects(&[], &[last]),
            [.., val, last] => SplitPlan::subjects(&[val], &[last]),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig { split: Some(SplitPlan::subjects(&["a"], &["b"])), ..RunConfig::default() };
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn version_is_mandatory() {
        assert!(RunConfig::from_toml("seed = 1").is_err());
        assert!(RunConfig::from_toml("version = 2").is_err());
        assert!(RunConfig::from_toml("version = 1\nbogus = 3").is_err());
        let cfg = RunConfig::from_toml("version = 1\nseed = 9\n[model]\nd_model = 16").unwrap();
        assert_eq!(cfg.experiment().train.seed, 9);
        assert_eq!(cfg.model.d_model, 16);
        assert_eq!(cfg.model.heads, 4);
    }

    #[test]
    fn module_example_parses() {
        let doc = include_str!("config.rs").lines().skip_while(|l| !l.starts_with("//! ```toml")).skip(1);
        let text: String = doc.take_while(|l| !l.starts_with("//! ```")).map(|l| format!("{}\n", l.trim_start_matches("//!").trim_start())).collect();
        let cfg = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg.synth.subject_scale, (0.7, 1.3));
        assert_eq!(cfg.split.unwrap().partition, hsa_core::data::Partition::Subjects { val: vec!["s04".into()], test: vec!["s05".into()] });
    }
}
