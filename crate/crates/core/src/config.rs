//! The complete set of hyperparameters for one run, serialized as TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::AugmentConfig;
use crate::encoder::EncoderConfig;
use crate::error::{ensure, Error, Result};
use crate::losses::LossConfig;
use crate::quantizer::QuantizerConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SscqConfig {
    pub encoder: EncoderConfig,
    pub quantizer: QuantizerConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
}

impl SscqConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.quantizer.sub_dim(self.encoder.embedding_dim)?;
        self.loss.validate()?;
        self.train.validate()?;
        ensure!(
            self.augment.scale_min > 0.0 && self.augment.scale_min <= self.augment.scale_max,
            Config,
            "augment scale range [{}, {}] is invalid",
            self.augment.scale_min,
            self.augment.scale_max
        );
        ensure!(
            self.augment.noise_scale >= 0.0,
            Config,
            "augment noise_scale must be non-negative"
        );
        ensure!(
            (0.0..1.0).contains(&self.augment.dropout_fraction),
            Config,
            "augment dropout_fraction must lie in [0, 1)"
        );
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Applies a `section.key = value` override, where `value` is a TOML
    /// literal (bare words are taken as strings).
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` lacks `=`")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("override key `{key}` must be section.field")))?;
        let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut root = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let table = root
            .get_mut(section)
            .and_then(toml::Value::as_table_mut)
            .ok_or_else(|| Error::Config(format!("unknown config section `{section}`")))?;
        let value = match (table.get(field), value) {
            (None, _) => return Err(Error::Config(format!("unknown config key `{key}`"))),
            (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (_, v) => v,
        };
        table.insert(field.to_string(), value);
        *self = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("override `{key}`: {e}")))?;
        Ok(())
    }

    /// Lower-case hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex_digest(self.to_toml().as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
