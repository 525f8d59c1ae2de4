//! The experiment config file: one JSON tree, unknown keys rejected.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use comm_core::runner::{EvalConfig, MethodConfig, RunConfig, TrainConfig};
use comm_core::synth::WorldSpec;
use comm_core::towers::{EncoderConfig, PretrainConfig};

use crate::UsageError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub seed: u64,
    /// Directory holding the pretrained checkpoint.
    pub checkpoint: PathBuf,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            seed: 0,
            checkpoint: PathBuf::from("runs/backbone"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Parent directory of run directories.
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub world: WorldSpec,
    pub backbone: BackboneSection,
    pub method: MethodConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output: OutputSection,
}

impl Config {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let c: Config = serde_json::from_str(text).map_err(|e| UsageError(format!("bad config: {e}")))?;
        c.run_config().validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            method: self.method.clone(),
            train: self.train.clone(),
            eval: self.eval.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_value_identical() {
        let mut c = Config::default();
        c.train.epochs = 7;
        c.method.self_reg = false;
        c.world.seed = 3;
        let back = Config::parse(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json(), c.to_json());
    }

    #[test]
    fn empty_object_means_defaults() {
        assert_eq!(Config::parse("{}").unwrap(), Config::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in [
            r#"{"wrold": {}}"#,
            r#"{"train": {"epoch": 2}}"#,
            r#"{"backbone": {"encoder": {"layers": 2}}}"#,
            r#"{"method": {"self_reg": true}}"#,
        ] {
            let e = Config::parse(bad).unwrap_err();
            assert_eq!(crate::exit_code(&e), 2, "{bad}");
        }
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let e = Config::parse(r#"{"train": {"batch_size": 0}}"#).unwrap_err();
        assert_eq!(crate::exit_code(&e), 2);
    }

    #[test]
    fn readme_example_parses_to_the_defaults() {
        let text = r#"{
  "world": {"seed": 0, "cl_classes": 20, "subsets": 5},
  "backbone": {"checkpoint": "runs/backbone", "pretrain": {"steps": 1500}},
  "method": {"name": "comm", "cross": true, "self": true, "realign": true},
  "train": {"scenario": "random", "epochs": 10, "seed": 0},
  "eval": {"mode": "both"},
  "output": {"dir": "runs"}
}"#;
        assert_eq!(Config::parse(text).unwrap(), Config::default());
    }
}
