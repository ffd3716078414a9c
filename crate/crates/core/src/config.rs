//! Experiment configuration: strict TOML with every key spelled out, so a
//! snapshot written back to disk fully describes the run that produced it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::LayerGraph;
use crate::search::DetectorConfig;
use crate::surgery::{Strategy, StrategyConfig};
use crate::synth::SyntheticTaskSpec;
use crate::training::TrainConfig;
use crate::zoo;
use crate::graph::HeadSpec;

/// Backbone selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// A name `zoo::by_name` understands.
    pub name: String,
    pub channels: usize,
    /// Input side in pixels; inputs are square.
    pub size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            name: "micro".into(),
            channels: 1,
            size: 32,
        }
    }
}

impl ModelConfig {
    pub fn input(&self) -> (usize, usize, usize) {
        (self.channels, self.size, self.size)
    }

    pub fn graph(&self) -> Result<LayerGraph> {
        zoo::by_name(&self.name, self.input())
    }
}

/// Where training data comes from: a manifest on disk or a generated task.
/// Exactly one of the two must be set.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticTaskSpec>,
    pub split_seed: u64,
    /// Center-crop and scale manifest images to this side.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resize: Option<u32>,
}

/// Optional warm start from an earlier run's checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    pub ckpt: PathBuf,
    /// Class count of the head the checkpoint was trained with.
    pub classes: usize,
}

/// One experiment, end to end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub strategy: StrategyConfig,
    pub data: DataConfig,
    pub training: TrainConfig,
    /// Correlation-analysis and detector knobs.
    pub svcca: DetectorConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<InitConfig>,
    /// Dump per-cutoff activation matrices after training.
    pub dump_activations: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            strategy: StrategyConfig {
                strategy: Strategy::Ftl,
                cutoff: None,
                unfreeze: None,
                head: HeadSpec::linear(2),
            },
            data: DataConfig::default(),
            training: TrainConfig::default(),
            svcca: DetectorConfig::default(),
            init: None,
            dump_activations: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse a config file; relative data and checkpoint paths resolve
    /// against the file's directory, and must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        if let Some(m) = &mut cfg.data.manifest {
            *m = resolve(dir, m, "data manifest")?;
        }
        if let Some(init) = &mut cfg.init {
            init.ckpt = resolve(dir, &init.ckpt, "init checkpoint")?;
        }
        Ok(cfg)
    }

    /// Full TOML text with every field present, defaults included.
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.manifest, &self.data.synthetic) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "set either data.manifest or data.synthetic, not both".into(),
                ))
            }
            (None, None) => {
                return Err(Error::Config(
                    "one of data.manifest or data.synthetic is required".into(),
                ))
            }
            _ => {}
        }
        if let Some(spec) = &self.data.synthetic {
            spec.validate()?;
        }
        self.model.graph()?;
        Ok(())
    }
}

fn resolve(dir: &Path, p: &Path, what: &str) -> Result<PathBuf> {
    let full = if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    };
    if !full.exists() {
        return Err(Error::Config(format!(
            "{what} `{}` does not exist",
            full.display()
        )));
    }
    Ok(full)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::TaskKind;

    fn sample() -> ExperimentConfig {
        ExperimentConfig {
            data: DataConfig {
                synthetic: Some(SyntheticTaskSpec {
                    kind: TaskKind::Shape,
                    per_class: 50,
                    seed: 3,
                    ..SyntheticTaskSpec::default()
                }),
                split_seed: 9,
                ..DataConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn toml_round_trip_preserves_every_field() {
        let cfg = sample();
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        for key in [
            "model", "strategy", "data", "training", "svcca", "lr", "batch", "patience",
            "variance_keep", "tau", "split_seed", "dump_activations",
        ] {
            assert!(text.contains(key), "snapshot must spell out `{key}`");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = sample().to_toml().unwrap();
        text.push_str("\nlerning_rate = 0.01\n");
        assert!(ExperimentConfig::from_toml(&text).is_err());
        let nested = text.replace("[training]", "[training]\nwarmup = 3");
        assert!(ExperimentConfig::from_toml(&nested).is_err());
    }

    #[test]
    fn data_source_must_be_exactly_one() {
        let mut cfg = sample();
        cfg.data.manifest = Some("somewhere.csv".into());
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.data.manifest = None;
        cfg.data.synthetic = None;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn load_resolves_and_checks_paths() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = sample();
        cfg.data.synthetic = None;
        cfg.data.manifest = Some("data/manifest.csv".into());
        let path = dir.path().join("run.toml");
        fs::write(&path, cfg.to_toml().unwrap()).unwrap();
        let missing = ExperimentConfig::load(&path);
        assert!(matches!(missing, Err(Error::Config(_))));
        fs::create_dir_all(dir.path().join("data")).unwrap();
        fs::write(dir.path().join("data/manifest.csv"), "path,label\n").unwrap();
        let loaded = ExperimentConfig::load(&path).unwrap();
        assert_eq!(
            loaded.data.manifest.unwrap(),
            dir.path().join("data/manifest.csv")
        );
    }

    #[test]
    fn unknown_model_names_fail_validation() {
        let mut cfg = sample();
        cfg.model.name = "resnet51".into();
        assert!(cfg.validate().is_err());
    }
}
