//! Run configuration and fingerprints.
//!
//! A run is described by one TOML file. Any field can be overridden from the
//! command line with a dotted path, e.g. `train.seed=3`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::condnet::UNetConfig;
use crate::error::{invalid, Error, Result};
use crate::metrics::RegionMode;
use crate::schedule::ScheduleConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    pub region: RegionMode,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            region: RegionMode::MaskedRegion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: DataConfig,
    pub model: UNetConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

impl RunConfig {
    /// Multi-speaker hyperparameters at 128 px.
    pub fn multi_speaker() -> Self {
        Self {
            data: DataConfig::default(),
            model: UNetConfig::multi_speaker(),
            schedule: ScheduleConfig::multi_speaker(),
            train: TrainConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }

    /// Small model and a 200-step linear schedule for CPU runs. Training
    /// perturbs the previous frame so sampling does not drift when the model
    /// is fed its own output.
    pub fn desk(image_size: usize) -> Self {
        Self {
            model: UNetConfig::desk(image_size),
            schedule: ScheduleConfig::desk(),
            train: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 8,
                prev_frame_noise: 0.2,
                ..TrainConfig::default()
            },
            ..Self::multi_speaker()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.build()?;
        self.train.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| invalid!("bad run config: {e}"))?;
        Ok(cfg)
    }

    /// Reads a config file, returning the parsed value and the verbatim text.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io("reading config", path, e))?;
        Ok((Self::from_toml_str(&text)?, text))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| invalid!("cannot serialize run config: {e}"))
    }

    /// Applies `key.path=value` overrides; values are parsed as TOML literals,
    /// falling back to plain strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).map_err(|e| invalid!("cannot serialize run config: {e}"))?;
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| invalid!("override {ov:?} is not of the form key=value"))?;
            let value = parse_literal(raw.trim());
            set_path(&mut root, key.trim(), value)?;
        }
        root.try_into().map_err(|e| invalid!("override produced an invalid config: {e}"))
    }

    pub fn fingerprint(&self) -> Result<String> {
        fingerprint_json(self)
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| invalid!("override key {key:?} does not name a table path"))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(invalid!("empty override key"))
}

/// Hex SHA-256 of a string.
pub fn fingerprint_str(s: &str) -> String {
    let digest = Sha256::digest(s.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Fingerprint of a value's canonical JSON (object keys sorted).
pub fn fingerprint_json<T: Serialize>(value: &T) -> Result<String> {
    let canonical = serde_json::to_value(value)?;
    Ok(fingerprint_str(&serde_json::to_string(&canonical)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_fingerprint() {
        let cfg = RunConfig::desk(32);
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.fingerprint().unwrap(), back.fingerprint().unwrap());
        assert_eq!(cfg.fingerprint().unwrap().len(), 64);
    }

    #[test]
    fn overrides_change_fields_and_fingerprint() {
        let cfg = RunConfig::desk(32);
        let o = cfg
            .with_overrides(&["train.seed=9".into(), "model.image_size=64".into(), "metrics.region=full_frame".into()])
            .unwrap();
        assert_eq!(o.train.seed, 9);
        assert_eq!(o.model.image_size, 64);
        assert_eq!(o.metrics.region, RegionMode::FullFrame);
        assert_ne!(o.fingerprint().unwrap(), cfg.fingerprint().unwrap());
        assert!(cfg.with_overrides(&["train.seed".into()]).is_err());
        assert!(cfg.with_overrides(&["train.bogus=1".into()]).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = RunConfig::desk(32).to_toml().unwrap();
        text.push_str("\n[extra]\nx = 1\n");
        assert!(RunConfig::from_toml_str(&text).is_err());
    }
}
