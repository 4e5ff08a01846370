//! Run configuration files (TOML).

use std::fs;
use std::path::{Path, PathBuf};

use mshift_core::dataset::{generate_synthetic, load_vectors, DatasetBundle, SyntheticSpec};
use mshift_core::model::ModelConfig;
use mshift_core::trainer::{Ablation, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Exactly one of `synthetic` and `path` must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    /// Vector file; relative paths are resolved against the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Row label in `report`; defaults to the ablation name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Relative paths are resolved against the config file.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub emit_embeddings: bool,
    pub dataset: DatasetSource,
    /// `input_dim`, `num_classes` and `num_sources` are taken from the dataset.
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("run")
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    /// Replaces the training seed, the model init seed and the synthetic seed.
    pub seed: Option<u64>,
    pub ablation: Option<Ablation>,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    /// The standard synthetic benchmark with the full method.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            label: None,
            output_dir: default_output_dir(),
            emit_embeddings: false,
            dataset: DatasetSource {
                synthetic: Some(SyntheticSpec::benchmark(seed)),
                path: None,
            },
            model: ModelConfig {
                init_seed: seed,
                ..ModelConfig::default()
            },
            train: TrainConfig::benchmark(seed),
        }
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads a config file, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        if let Some(p) = cfg.dataset.path.as_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.train.seed = seed;
            self.model.init_seed = seed;
            if let Some(s) = self.dataset.synthetic.as_mut() {
                s.seed = seed;
            }
        }
        if let Some(a) = o.ablation {
            self.train.ablation = a;
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.train.ablation.name().to_string())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        match (&self.dataset.synthetic, &self.dataset.path) {
            (Some(s), None) => s.validate()?,
            (None, Some(_)) => {}
            _ => {
                return Err(CliError::Config(
                    "dataset needs exactly one of `synthetic` and `path`".into(),
                ))
            }
        }
        self.train.validate()?;
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<DatasetBundle, CliError> {
        self.validate()?;
        match (&self.dataset.synthetic, &self.dataset.path) {
            (Some(s), _) => Ok(generate_synthetic(s)?),
            (_, Some(p)) => Ok(load_vectors(p)?),
            _ => unreachable!("validated"),
        }
    }

    /// The model config with its shape taken from `bundle`.
    pub fn model_for(&self, bundle: &DatasetBundle) -> Result<ModelConfig, CliError> {
        let m = ModelConfig {
            input_dim: bundle.dim,
            num_classes: bundle.num_classes,
            num_sources: bundle.num_sources(),
            ..self.model.clone()
        };
        m.validate()?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = RunConfig::parse("[dataset]\npath = \"data.vec\"\n").unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.train.gamma, 0.0001);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.model.dropout, 0.5);
        assert_eq!(cfg.label(), "full");
        assert!(!cfg.emit_embeddings);
    }

    #[test]
    fn benchmark_round_trips_through_toml() {
        let cfg = RunConfig::benchmark(3);
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn dataset_must_be_unique() {
        let mut cfg = RunConfig::benchmark(0);
        cfg.dataset.path = Some("x".into());
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
        cfg.dataset = DatasetSource {
            synthetic: None,
            path: None,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[dataset]\npath = \"a\"\n[train]\nlearning_rate = 1\n").is_err());
    }

    #[test]
    fn overrides() {
        let mut cfg = RunConfig::benchmark(0);
        cfg.apply(&Overrides {
            seed: Some(9),
            ablation: Some(Ablation::NoCpa),
            output_dir: Some("out".into()),
        });
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.model.init_seed, 9);
        assert_eq!(cfg.dataset.synthetic.as_ref().unwrap().seed, 9);
        assert_eq!(cfg.label(), "no_cpa");
        assert_eq!(cfg.output_dir, PathBuf::from("out"));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "output_dir = \"o\"\n[dataset]\npath = \"d.vec\"\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.output_dir, dir.path().join("o"));
        assert_eq!(cfg.dataset.path.unwrap(), dir.path().join("d.vec"));
    }
}
