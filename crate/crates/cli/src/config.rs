use std::path::{Path, PathBuf};
use std::str::FromStr;

use hwau_core::data::{PhantomSpec, Split};
use hwau_core::network::ModelConfig;
use hwau_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

/// Everything a command needs, resolved from defaults, the config file and overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Parent of the timestamped run directories.
    pub output_root: PathBuf,
    pub data: DataConfig,
    pub phantom: PhantomConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_root: PathBuf::from("runs"),
            data: DataConfig::default(),
            phantom: PhantomConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Case list; when absent, train and ablate generate a phantom set inside the run directory.
    pub manifest: Option<PathBuf>,
    /// Split scored by eval and ablate.
    pub eval_split: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { manifest: None, eval_split: "test".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub count: usize,
    pub spec: PhantomSpec,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig { count: 10, spec: PhantomSpec::default() }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies `key.path=value`
    /// overrides and the seed flag, then validates.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                text.parse::<Table>().map_err(|e| CliError::Config(format!("{}: {}", p.display(), one_line(&e.to_string()))))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(one_line(&e.to_string())))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        self.phantom.spec.validate()?;
        self.eval_split()?;
        if self.data.manifest.is_none() {
            let spec = &self.phantom.spec;
            if spec.modalities != self.model.in_channels || spec.modalities != self.model.out_channels {
                return Err(CliError::Config(format!(
                    "phantom.spec.modalities = {} but the model has {} inputs and {} outputs",
                    spec.modalities, self.model.in_channels, self.model.out_channels
                )));
            }
            if self.phantom.count == 0 {
                return Err(CliError::Config("phantom.count must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn eval_split(&self) -> Result<Split, CliError> {
        match Split::from_str(&self.data.eval_split) {
            Ok(Split::Unassigned) | Err(_) => Err(CliError::Config(format!(
                "data.eval_split must be train, val or test, got {:?}",
                self.data.eval_split
            ))),
            Ok(s) => Ok(s),
        }
    }

    /// The fully resolved configuration, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable")
    }
}

/// Sets a dot-separated key. The value is read as a TOML literal, or as a
/// bare string when it does not parse as one.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override {spec:?} has an empty key segment")));
    }
    let value = format!("v = {}", raw.trim())
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.trim().to_string()));
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut node = table;
    for p in parents {
        let entry = node.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {spec:?}: {p} is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
