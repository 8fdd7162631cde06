//! Declarative run configuration (TOML).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::Res12Config;
use crate::error::{Error, Result};
use crate::evaluation::MetricSpace;
use crate::inference::Tiling;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::nn::InitMethod;
use crate::training::TrainConfig;

/// File written next to every run's outputs.
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub architecture: String,
    pub res12: Res12Config,
    /// Initializer for an untrained backbone.
    pub init: InitMethod,
    /// Trained backbone checkpoint; when unset the backbone is built from `init`.
    pub pretrained: Option<PathBuf>,
}

impl Default for BackboneSection {
    fn default() -> Self {
        BackboneSection {
            architecture: "res12".into(),
            res12: Res12Config::default(),
            init: InitMethod::KaimingUniform,
            pretrained: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train_manifests: Vec<PathBuf>,
    pub test_manifests: Vec<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub protocol: Option<u8>,
    pub tiling: Tiling,
    pub metric_space: MetricSpace,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub backbone: BackboneSection,
    /// `model.output.patch` is always taken from `train.patch`.
    pub model: ModelConfig,
    pub data: DataSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Fills derived fields and checks every section.
    pub fn resolve(mut self) -> Result<Self> {
        self.model.output.patch = self.train.patch;
        let mut problems = Vec::new();
        let mut check = |r: Result<()>| {
            if let Err(e) = r {
                problems.push(e.to_string());
            }
        };
        check(self.train.validate());
        check(self.loss.validate());
        check(self.model.validate());
        if self.backbone.pretrained.is_none() {
            check(self.backbone.res12.validate());
        }
        if let Some(p) = self.eval.protocol {
            check(crate::evaluation::Protocol::from_number(p).map(|_| ()));
        }
        if problems.is_empty() {
            Ok(self)
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default().resolve().unwrap();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nepochz = 3\n").is_err());
        assert!(RunConfig::from_toml("[mystery]\n").is_err());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::from_toml("[train]\nepochs = 5\npatch = 32\ntrain_kinds = [\"rain\"]\n")
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(c.train.epochs, 5);
        assert_eq!(c.model.output.patch, 32);
        assert_eq!(c.loss.lambda_p, 0.04);
    }

    #[test]
    fn invalid_values_are_collected() {
        let err =
            RunConfig::from_toml("[train]\nbatch_size = 0\nlr0 = -1.0\n[loss]\nlambda_p = -2.0\n")
                .unwrap()
                .resolve()
                .unwrap_err();
        let Error::Validation(v) = err else { panic!() };
        assert_eq!(v.len(), 2);
    }
}
