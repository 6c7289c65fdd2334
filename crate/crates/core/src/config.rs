//! Run configuration: defaults, then a TOML file, then `section.key=value`
//! overrides. Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decode::GenerationConfig;
use crate::error::{RadError, Result};
use crate::model::ModelConfig;
use crate::response_aware::RaConfig;
use crate::train::TrainConfig;
use crate::util;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Reuse a saved vocabulary instead of building one from `train`.
    pub vocab: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub ra: RaConfig,
    pub data: DataConfig,
    pub generation: GenerationConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate().map_err(|e| RadError::Config(e.to_string()))?;
        self.ra.validate(self.model.embed_dim).map_err(|e| RadError::Config(e.to_string()))?;
        self.generation.validate()
    }

    /// Builds the configuration from an optional file and overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => util::read_to_string(p)?
                .parse::<toml::Table>()
                .map_err(|e| RadError::Config(format!("{}: {e}", p.display())))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| RadError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| RadError::Config(e.to_string()))
    }
}

/// Applies `a.b=value`; the value is read as TOML and falls back to a bare
/// string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| RadError::Config(format!("override {assignment:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(RadError::Config(format!("bad override key {key:?}")));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (last, parents) = path.split_last().expect("non-empty");
    let mut node = table;
    for p in parents {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| RadError::Config(format!("{p} is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}
