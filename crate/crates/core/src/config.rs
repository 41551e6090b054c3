//! Run configuration: one TOML tree covering model, loss, data, augmentation
//! and training. Every key has a default; dotted overrides (`train.epochs=5`)
//! are applied on top of the file before validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BackboneVariant};
use crate::data::{AugmentationPolicy, Layout};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::DEFAULT_THRESHOLD;
use crate::network::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub layout: Layout,
    pub height: usize,
    pub width: usize,
    /// Split manifest; created by `split` when absent.
    pub manifest: Option<PathBuf>,
    pub k: usize,
    pub stratify: bool,
    /// Drop tumor-free images (BUSI*).
    pub exclude_normal: bool,
    pub threshold: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            layout: Layout::Busi,
            height: 256,
            width: 256,
            manifest: None,
            k: 5,
            stratify: true,
            exclude_normal: false,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub augment: AugmentationPolicy,
}

impl Config {
    /// Desk-scale preset: tiny backbone, 64×64 inputs, no augmentation,
    /// per-step schedule.
    pub fn tiny() -> Self {
        let mut c = Self::default();
        c.model.backbone = BackboneConfig {
            variant: BackboneVariant::TinyTest,
            ..Default::default()
        };
        c.data.height = 64;
        c.data.width = 64;
        c.data.layout = Layout::Generic;
        c.train = TrainConfig::tiny();
        c.augment = AugmentationPolicy::disabled();
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        crate::data::check_target(self.data.height, self.data.width)?;
        if self.data.k < 2 {
            return Err(Error::Config(format!("data.k must be at least 2, got {}", self.data.k)));
        }
        if !(self.data.threshold > 0.0 && self.data.threshold < 1.0) {
            return Err(Error::Config("data.threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Parse a TOML document, apply overrides, validate.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut tree: toml::Value = text
            .parse::<toml::Table>()
            .map(toml::Value::Table)
            .map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: Config = tree
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
            .map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
                other => other,
            })
    }

    /// Start from a preset instead of a file.
    pub fn from_preset(preset: &Config, overrides: &[String]) -> Result<Self> {
        Self::from_toml_str(&preset.to_toml()?, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    // reuse the TOML grammar for the right-hand side; bare words become strings
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Set `a.b.c=value` inside a TOML tree, creating tables as needed.
pub fn apply_override(tree: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' must look like key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key '{key}' is malformed")));
    }
    let mut node = tree;
    for p in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}' descends into a value")))?;
        node = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override '{key}' descends into a value")))?;
    table.insert(parts[parts.len() - 1].to_string(), parse_scalar(raw.trim()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = Config::default();
        let back = Config::from_toml_str(&c.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.train.epochs, 100);
        assert_eq!(c.train.batch_size, 16);
    }

    #[test]
    fn dotted_overrides() {
        let c = Config::from_toml_str(
            "[train]\nepochs = 3\n",
            &[
                "train.base_lr=0.01".into(),
                "model.backbone.variant=tiny-test".into(),
                "loss.lambdas.l3=0.5".into(),
                "data.layout=generic".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.base_lr, 0.01);
        assert_eq!(c.model.backbone.variant, BackboneVariant::TinyTest);
        assert_eq!(c.loss.lambdas.l3, 0.5);
        assert_eq!(c.data.layout, Layout::Generic);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(matches!(Config::from_toml_str("[train]\nepoch = 3\n", &[]), Err(Error::Config(_))));
        assert!(matches!(
            Config::from_toml_str("", &["data.height=250".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            Config::from_toml_str("", &["model.modules.bgm=false".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(Config::from_toml_str("", &["novalue".into()]), Err(Error::Config(_))));
    }
}
