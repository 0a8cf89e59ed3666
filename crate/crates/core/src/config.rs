//! Run configuration: one TOML file naming the data, the model and the training regimen.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tasks::TaskKind;
use crate::training::TrainConfig;

/// Dataset locations. Relative paths are resolved against the config file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train: PathBuf,
    pub dev: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    /// Stem of a description cache to reuse and refresh.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub task: TaskKind,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub data: DataPaths,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    /// Parses without validating, so command-line overrides can still apply.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    /// Prefixes every relative path with `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        fix(&mut self.data.train);
        fix(&mut self.data.dev);
        if let Some(p) = self.data.test.as_mut() {
            fix(p);
        }
        if let Some(p) = self.data.cache.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() || self.run_id.contains(['\t', '\n', '/', '\\']) {
            return Err(Error::Config(format!(
                "run_id `{}` must be non-empty without tabs, newlines or path separators",
                self.run_id
            )));
        }
        for (name, p) in [("data.train", &self.data.train), ("data.dev", &self.data.dev)] {
            if p.as_os_str().is_empty() {
                return Err(Error::Config(format!("{name} is empty")));
            }
        }
        self.model.validate()?;
        self.train.validate()
    }

    /// The fully resolved configuration as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serialising run config: {e}")))
    }

    pub fn checkpoint_stem(&self) -> PathBuf {
        self.out_dir.join(&self.run_id)
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.out_dir.join("metrics.tsv")
    }
}
