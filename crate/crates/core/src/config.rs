//! Declarative run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::eval::ExperimentProtocol;
use crate::masking::MaskingConfig;
use crate::training::StageConfig;

/// Environment variable naming the default dataset root.
pub const DATA_ROOT_ENV: &str = "MAST_DATA_ROOT";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Canonical dataset root; falls back to `$MAST_DATA_ROOT`.
    pub root: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds every stochastic component of every stage.
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub masking: MaskingConfig,
    pub protocol: ExperimentProtocol,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            masking: MaskingConfig::default(),
            protocol: ExperimentProtocol::default(),
            stage1: StageConfig::for_stage(1),
            stage2: StageConfig::for_stage(2),
            stage3: StageConfig::for_stage(3),
        }
    }
}

impl RunConfig {
    /// Parses TOML text, applies `key.path=value` overrides, resolves and
    /// validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<RunConfig> {
        let mut value: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(value)
            .try_into()
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.resolved()
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        RunConfig::from_toml(&text, overrides)
    }

    /// Pins each stage section to its stage and the run seed, then validates.
    pub fn resolved(mut self) -> Result<RunConfig> {
        for (n, s) in [(1, &mut self.stage1), (2, &mut self.stage2), (3, &mut self.stage3)] {
            s.stage = n;
            s.seed = self.seed;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.masking.scaled_to(self.model.input_size).validate(self.model.input_size)?;
        self.protocol.validate()?;
        for s in [&self.stage1, &self.stage2, &self.stage3] {
            s.validate()?;
        }
        Ok(())
    }

    pub fn stage(&self, n: u8) -> &StageConfig {
        match n {
            1 => &self.stage1,
            2 => &self.stage2,
            _ => &self.stage3,
        }
    }

    pub fn stage_mut(&mut self, n: u8) -> &mut StageConfig {
        match n {
            1 => &mut self.stage1,
            2 => &mut self.stage2,
            _ => &mut self.stage3,
        }
    }

    /// Dataset root from the config, else from the environment.
    pub fn data_root(&self) -> Result<PathBuf> {
        self.data
            .root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .ok_or_else(|| Error::Config(format!("no dataset root: set data.root or ${DATA_ROOT_ENV}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot encode config: {e}")))
    }
}

/// Sets `a.b.c = value`, parsing `value` as a TOML literal and falling back
/// to a bare string.
pub fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = root;
    for p in parents {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
