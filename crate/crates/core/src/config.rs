//! Run configuration: one TOML file with the sections `data`, `masks`,
//! `model`, `disc`, `train` and `eval`, plus `section.key = value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adversarial::DiscConfig;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::generator::GeneratorConfig;
use crate::maskgen::MaskSpec;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training manifest.
    pub train_manifest: Option<PathBuf>,
    /// Run directory for checkpoints and metric logs.
    pub out_dir: PathBuf,
    /// Training-state archive to resume from.
    pub resume: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_manifest: None,
            out_dir: PathBuf::from("runs/default"),
            resume: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub data: DataConfig,
    pub masks: MaskSpec,
    pub model: GeneratorConfig,
    pub disc: DiscConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn nearest<'a>(key: &str, candidates: impl Iterator<Item = &'a String>) -> Option<&'a String> {
    candidates
        .map(|c| (strsim::levenshtein(key, c), c))
        .filter(|(d, c)| *d <= 3.max(c.len() / 3))
        .min_by_key(|(d, _)| *d)
        .map(|(_, c)| c)
}

/// Rejects keys absent from `schema`, naming the closest valid sibling.
fn check_keys(value: &Value, schema: &Value, path: &str) -> Result<()> {
    let (Value::Object(v), Value::Object(s)) = (value, schema) else {
        return Ok(());
    };
    for (k, child) in v {
        let full = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        match s.get(k) {
            Some(sub) => check_keys(child, sub, &full)?,
            None => {
                let hint = nearest(k, s.keys())
                    .map(|n| format!("; did you mean `{n}`?"))
                    .unwrap_or_default();
                return Err(Error::Config(format!("unknown key `{full}`{hint}")));
            }
        }
    }
    Ok(())
}

fn schema() -> Value {
    serde_json::to_value(Config::default()).expect("default config serializes")
}

/// Parses an override value as a TOML literal, or as a bare string.
fn override_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts.pop().filter(|l| !l.is_empty()).ok_or_else(|| Error::Config(format!("bad override key `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(leaf.to_string(), value);
    Ok(())
}

/// A run length given without a warm-up length keeps the default warm-up
/// fraction (15 of 100 epochs).
fn scale_default_warmup(table: &mut toml::Table) {
    let Some(train) = table.get_mut("train").and_then(|t| t.as_table_mut()) else {
        return;
    };
    if train.contains_key("warmup_epochs") {
        return;
    }
    if let Some(epochs) = train.get("epochs").and_then(|e| e.as_integer()) {
        let d = TrainConfig::default();
        let warmup = d.warmup_epochs * epochs as f64 / d.epochs as f64;
        train.insert("warmup_epochs".into(), toml::Value::Float(warmup));
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.masks.validate()?;
        self.model.validate()?;
        self.disc.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Parses TOML text, applies `(dotted key, value)` overrides and validates.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in overrides {
            set_path(&mut table, k, override_value(v))?;
        }
        scale_default_warmup(&mut table);
        let json = serde_json::to_value(&table).map_err(|e| Error::Config(e.to_string()))?;
        check_keys(&json, &schema(), "")?;
        let cfg: Config = toml::from_str(&toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?)
            .map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (defaults only when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
