//! Run configuration: every hyperparameter in one TOML document, with
//! dotted `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::eval::{DecodeConfig, EvalConfig};
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::train::{OptimConfig, StopGoConfig};

/// Environment variable naming a directory that holds the default
/// `uniav.toml`.
pub const CONFIG_DIR_ENV: &str = "UNIAV_CONFIG_DIR";
pub const CONFIG_FILE_NAME: &str = "uniav.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub schedule: StopGoConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
    pub synthetic: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            schedule: StopGoConfig::default(),
            decode: DecodeConfig::default(),
            eval: EvalConfig::default(),
            synthetic: SyntheticSpec::default(),
        }
    }
}

fn parse_err(context: &str, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        context: context.to_string(),
        detail: e.to_string(),
    }
}

impl RunConfig {
    /// Defaults, overlaid with `file` (if any), then with `overrides` of the
    /// form `section.key=value`. Values parse as TOML literals and fall back
    /// to plain strings.
    pub fn resolve(file: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut root = toml::Table::try_from(RunConfig::default()).map_err(|e| parse_err("defaults", e))?;
        if let Some(text) = file {
            let doc: toml::Table = text.parse().map_err(|e| parse_err("config file", e))?;
            merge(&mut root, doc);
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let value = parse_value(raw.trim());
            set_dotted(&mut root, key.trim(), value)?;
        }
        let cfg: RunConfig = root.try_into().map_err(|e| parse_err("config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        match path {
            None => Self::resolve(None, overrides),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::resolve(Some(&text), overrides)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.eval.validate()?;
        self.synthetic.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| parse_err("config", e))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set_dotted(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut table = root;
    for p in path {
        table = match table.get_mut(*p) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(Error::Config(format!("unknown config section `{p}` in `{key}`"))),
        };
    }
    if !table.contains_key(*last) {
        return Err(Error::Config(format!("unknown config key `{key}`")));
    }
    table.insert(last.to_string(), value);
    Ok(())
}
