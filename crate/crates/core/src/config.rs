//! Run configuration: a TOML file with one section per component, plus
//! dotted-key overrides such as `train.lr=0.01`.
//!
//! ```toml
//! out = "runs/demo"
//!
//! [data]
//! dir = "data/synthetic"
//!
//! [model]
//! d_model = 32
//! disable = ["moe", "gate"]
//!
//! [train]
//! epochs = 30
//! strategy = "shuffled"
//!
//! [train.loss]
//! lambda = 0.25
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SyntheticConfig, WindowSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory of session CSV files.
    pub dir: Option<PathBuf>,
    /// Class count; defaults to the manifest's, else the largest label plus one.
    pub classes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out: PathBuf,
    pub data: DataConfig,
    pub window: WindowSpec,
    /// `window`, `channels` and `classes` are filled in from the data.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            window: WindowSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

fn config_error(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

fn literal(value: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(config_error)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_error)
    }

    /// Applies `section.key=value` overrides. Values are read as TOML
    /// literals, falling back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Table::try_from(self).map_err(config_error)?;
        for item in overrides {
            let item = item.as_ref();
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            let path: Vec<&str> = key.trim().split('.').collect();
            let (last, parents) = path.split_last().expect("split yields one item");
            let mut table = &mut root;
            for part in parents {
                table = table
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a section")))?;
            }
            table.insert(last.to_string(), literal(value.trim()));
        }
        root.try_into().map_err(config_error)
    }

    /// Sets every seed in the run.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.synthetic.seed = seed;
    }

    /// Model config with data-dependent fields taken from `data`.
    pub fn resolve_model(&self, data: &Dataset) -> ModelConfig {
        ModelConfig {
            window: self.window.window,
            channels: data.channels,
            classes: data.classes,
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        self.train.validate()?;
        self.synthetic.validate()
    }

    /// Writes `run_config.json` into `dir`.
    pub fn write_json(&self, dir: &Path) -> Result<()> {
        let path = dir.join("run_config.json");
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
