//! Run configuration: a named preset, optionally overlaid by a TOML file and
//! then by `key.path=value` overrides.
//!
//! ```toml
//! preset = "synthetic"
//!
//! [train]
//! epochs = 40
//!
//! [train.ssl]
//! task = "relative"
//!
//! [cv]
//! folds = 5
//! ```

use std::path::Path;

use milbag_core::data::DatasetSpec;
use milbag_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PRESETS: [&str; 4] = ["paper_defaults", "synthetic", "alpha_sweep", "mu_sweep"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub folds: usize,
    pub repeats: usize,
    /// Seed of the fold assignment; model seeds derive from `train.seed`.
    pub seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 10,
            repeats: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParameter {
    Alpha,
    Mu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    /// Share of each training fold held out for validation.
    pub validation_fraction: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            parameter: SweepParameter::Alpha,
            values: vec![0.0125, 0.025, 0.05, 0.1],
            validation_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub preset: String,
    pub train: TrainConfig,
    /// Generator settings used by `generate` and by `--dataset synth`.
    pub data: DatasetSpec,
    pub cv: CvConfig,
    pub sweep: SweepConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self::paper_defaults()
    }
}

impl Config {
    pub fn paper_defaults() -> Self {
        Self {
            preset: "paper_defaults".into(),
            train: TrainConfig::paper_defaults(),
            data: DatasetSpec::default(),
            cv: CvConfig::default(),
            sweep: SweepConfig::default(),
        }
    }

    /// Narrower network and a faster schedule, sized for the synthetic
    /// dataset on a workstation.
    pub fn synthetic() -> Self {
        Self {
            preset: "synthetic".into(),
            train: TrainConfig::synthetic(),
            data: DatasetSpec::default(),
            cv: CvConfig {
                folds: 10,
                repeats: 3,
                seed: 0,
            },
            sweep: SweepConfig::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "paper_defaults" => Self::paper_defaults(),
            "synthetic" => Self::synthetic(),
            "alpha_sweep" => Self {
                preset: name.into(),
                ..Self::paper_defaults()
            },
            "mu_sweep" => Self {
                preset: name.into(),
                sweep: SweepConfig {
                    parameter: SweepParameter::Mu,
                    values: vec![0.1, 0.3, 0.5, 1.0],
                    validation_fraction: 0.2,
                },
                ..Self::paper_defaults()
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?} (available: {})",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    /// Builds a configuration from an optional file, an optional preset name
    /// (which wins over the file's `preset` key) and `key.path=value`
    /// overrides, applied in that order.
    pub fn load(file: Option<&Path>, preset: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut layer = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        let name = match (preset, layer.get("preset")) {
            (Some(p), _) => p.to_string(),
            (None, Some(toml::Value::String(p))) => p.clone(),
            (None, Some(other)) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
            (None, None) => "paper_defaults".to_string(),
        };
        layer.insert("preset".into(), toml::Value::String(name.clone()));
        let mut merged = toml::Value::try_from(Self::preset(&name)?).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, toml::Value::Table(layer));
        for o in overrides {
            apply_override(&mut merged, o)?;
        }
        let config: Config = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.train
            .validate()
            .map_err(|e| Error::Config(format!("train: {e}")))?;
        self.data.validate().map_err(|e| Error::Config(format!("data: {e}")))?;
        if self.cv.folds < 2 || self.cv.repeats == 0 {
            return Err(Error::Config("cv needs folds ≥ 2 and repeats ≥ 1".into()));
        }
        if !(0.0 < self.sweep.validation_fraction && self.sweep.validation_fraction < 1.0) {
            return Err(Error::Config("sweep.validation_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    /// SHA-256 of the configuration's canonical JSON, as lowercase hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex(&Sha256::digest(json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn merge(base: &mut toml::Value, layer: toml::Value) {
    match (base, layer) {
        (toml::Value::Table(b), toml::Value::Table(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(existing) => merge(existing, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, l) => *b = l,
    }
}

/// `train.adam.learning_rate=1e-3`; the value is parsed as TOML, falling
/// back to a bare string.
fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not of the form key.path=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {path:?}: {} is not a table", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            table.insert(key.to_string(), value);
            return Ok(());
        }
        node = table
            .get_mut(*key)
            .ok_or_else(|| Error::Config(format!("override {path:?}: unknown key {key:?}")))?;
    }
    unreachable!("split yields at least one key")
}
