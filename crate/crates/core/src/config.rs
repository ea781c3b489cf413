//! Run configuration: one TOML document with `[dataset]`, `[model]`,
//! `[train]` and `[eval]` tables. Every field has a default, unknown keys are
//! rejected by name, and `section.key=value` overrides are applied on top of
//! the file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::sepnet::SepNetHyper;
use crate::spectral::StftConfig;
use crate::synthdata::{build_catalog_with, DatasetManifest};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_classes: usize,
    pub seed: u64,
    pub sample_rate: u32,
    pub segment_secs: f64,
    pub stft: StftConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_classes: 8,
            seed: 0,
            sample_rate: 8000,
            segment_secs: 0.5,
            stft: StftConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn build(&self) -> Result<DatasetManifest> {
        build_catalog_with(
            self.n_classes,
            self.seed,
            self.sample_rate,
            self.segment_secs,
            self.stft,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: SepNetHyper,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Splits `a.b.c=value` into its path and a TOML value. Values that do not
/// parse as TOML are taken as bare strings.
pub fn parse_override(text: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{text}` is not of the form key=value")))?;
    let key = key.trim();
    let path: Vec<String> = key.split('.').map(|s| s.trim().to_string()).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!(
            "override key `{key}` has an empty component"
        )));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((path, value))
}

fn set_path(root: &mut Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = root;
    for (i, p) in parents.iter().enumerate() {
        let entry = table
            .entry(p.clone())
            .or_insert_with(|| Value::Table(Table::new()));
        table = entry.as_table_mut().ok_or_else(|| {
            Error::Config(format!(
                "config key `{}` is not a table",
                path[..=i].join(".")
            ))
        })?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

fn decode(table: Table) -> std::result::Result<RunConfig, String> {
    RunConfig::deserialize(Value::Table(table)).map_err(|e| e.to_string())
}

impl RunConfig {
    /// Parses `text` (may be empty) and applies `overrides` in order.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        decode(table.clone()).map_err(Error::Config)?;
        for o in overrides {
            let (path, value) = parse_override(o)?;
            set_path(&mut table, &path, value)?;
            decode(table.clone())
                .map_err(|e| Error::Config(format!("override `{}`: {e}", path.join("."))))?;
        }
        let cfg = decode(table).map_err(Error::Config)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` if given (defaults otherwise) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with(&text, overrides).map_err(|e| match (e, path) {
            (Error::Config(msg), Some(p)) => Error::Config(format!("{}: {msg}", p.display())),
            (e, _) => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(&self.model)?;
        self.eval.validate()?;
        self.dataset.stft.validate()?;
        if self.dataset.n_classes < 2 {
            return Err(Error::Config("dataset.n_classes must be >= 2".into()));
        }
        Ok(())
    }
}
