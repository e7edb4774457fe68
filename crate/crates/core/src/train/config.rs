//! Run configuration as flat `key = value` text.
//!
//! Lines are trimmed; blank lines and lines starting with `#` are skipped,
//! and a `#` after a value starts a comment. Keys are dotted
//! (`rap.kl_coef = 5e-3`). A `preset` key, wherever it appears, is applied
//! before every other key. Unknown keys are rejected.

use std::path::PathBuf;
use std::str::FromStr;

use crate::backbone::{BackboneConfig, Scale};
use crate::data::augment::AugmentConfig;
use crate::data::tds::fnv1a64;
use crate::error::{CoreError, Result};
use crate::hac::{HacConfig, HacMode};
use crate::model::ModelConfig;
use crate::rap::{EdlLossConfig, NllForm, Schedule};
use crate::train::adam::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// 150 epochs, batch 128.
    Primary,
    /// 100 epochs, batch 96.
    RetinaMnist,
}

impl FromStr for Preset {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "primary" => Ok(Preset::Primary),
            "retinamnist" => Ok(Preset::RetinaMnist),
            _ => Err(CoreError::input(format!("unknown preset `{s}` (primary, retinamnist)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub scale: Scale,
    pub image_size: usize,
    pub patch_size: usize,
    pub state_dim: usize,
    pub hac_enabled: bool,
    pub hac: HacConfig,
    pub rap: EdlLossConfig,
    pub aug: AugmentConfig,
    /// Fraction of the training set held out for validation when no
    /// validation set is given.
    pub val_fraction: f64,
    /// Write `epoch_NNNN.ckpt` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// When false the `seconds` column of the metrics log is written as 0,
    /// which makes logs of identical runs byte-identical.
    pub log_seconds: bool,
    pub train_path: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 128,
            adam: AdamConfig::default(),
            seed: 0,
            scale: Scale::T,
            image_size: 28,
            patch_size: 4,
            state_dim: 1,
            hac_enabled: true,
            hac: HacConfig::default(),
            rap: EdlLossConfig::default(),
            aug: AugmentConfig::new(28),
            val_fraction: 0.1,
            checkpoint_every: 0,
            log_seconds: true,
            train_path: None,
            val_path: None,
            test_path: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CoreError::input(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(CoreError::input(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

/// Splits `key = value` text into pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CoreError::input(format!("config line {}: expected `key = value`, got `{raw}`", lineno + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CoreError::input(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl TrainConfig {
    pub fn preset(p: Preset) -> Self {
        let mut cfg = TrainConfig::default();
        if p == Preset::RetinaMnist {
            cfg.epochs = 100;
            cfg.batch_size = 96;
        }
        cfg
    }

    /// Applies `pairs` on top of `self`, `preset` first.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs.iter().filter(|(k, _)| k == "preset") {
            let keep_paths = (self.train_path.clone(), self.val_path.clone(), self.test_path.clone());
            *self = TrainConfig::preset(parse::<Preset>(k, v)?);
            (self.train_path, self.val_path, self.test_path) = keep_paths;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.learning_rate" => self.adam.lr = parse(key, v)?,
            "train.beta1" => self.adam.beta1 = parse(key, v)?,
            "train.beta2" => self.adam.beta2 = parse(key, v)?,
            "train.eps" => self.adam.eps = parse(key, v)?,
            "train.seed" => self.seed = parse(key, v)?,
            "train.val_fraction" => self.val_fraction = parse(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "train.log_seconds" => self.log_seconds = parse_bool(key, v)?,
            "model.scale" => self.scale = parse(key, v)?,
            "model.image_size" => self.image_size = parse(key, v)?,
            "model.patch_size" => self.patch_size = parse(key, v)?,
            "model.state_dim" => self.state_dim = parse(key, v)?,
            "model.hac" => self.hac_enabled = parse_bool(key, v)?,
            "hac.mode" => self.hac.mode = parse::<HacMode>(key, v)?,
            "hac.had_feat_dim" => self.hac.had_feat_dim = parse(key, v)?,
            "hac.reduction" => self.hac.reduction = parse(key, v)?,
            "hac.gate_bias_init" => self.hac.gate_bias_init = parse(key, v)?,
            "rap.kl_coef" => self.rap.kl_coef = parse(key, v)?,
            "rap.kl_scale" => self.rap.kl_scale = parse(key, v)?,
            "rap.schedule" => self.rap.schedule = parse::<Schedule>(key, v)?,
            "rap.anneal_horizon" => self.rap.anneal_horizon = parse(key, v)?,
            "rap.nll_form" => self.rap.nll_form = parse::<NllForm>(key, v)?,
            "rap.kl_masking" => self.rap.kl_masking = parse_bool(key, v)?,
            "aug.scale_min" => self.aug.scale_min = parse(key, v)?,
            "aug.scale_max" => self.aug.scale_max = parse(key, v)?,
            "aug.ratio_min" => self.aug.ratio_min = parse(key, v)?,
            "aug.ratio_max" => self.aug.ratio_max = parse(key, v)?,
            "aug.flip_p" => self.aug.flip_p = parse(key, v)?,
            "data.train" => self.train_path = path(v),
            "data.val" => self.val_path = path(v),
            "data.test" => self.test_path = path(v),
            _ => return Err(CoreError::Key(key.to_string())),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply(&parse_pairs(text)?)?;
        Ok(cfg)
    }

    /// Every key in a fixed order. `from_text(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let p = |o: &Option<PathBuf>| o.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let rows: Vec<(&str, String)> = vec![
            ("train.epochs", self.epochs.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.learning_rate", self.adam.lr.to_string()),
            ("train.beta1", self.adam.beta1.to_string()),
            ("train.beta2", self.adam.beta2.to_string()),
            ("train.eps", self.adam.eps.to_string()),
            ("train.seed", self.seed.to_string()),
            ("train.val_fraction", self.val_fraction.to_string()),
            ("train.checkpoint_every", self.checkpoint_every.to_string()),
            ("train.log_seconds", self.log_seconds.to_string()),
            ("model.scale", self.scale.to_string()),
            ("model.image_size", self.image_size.to_string()),
            ("model.patch_size", self.patch_size.to_string()),
            ("model.state_dim", self.state_dim.to_string()),
            ("model.hac", self.hac_enabled.to_string()),
            ("hac.mode", self.hac.mode.to_string()),
            ("hac.had_feat_dim", self.hac.had_feat_dim.to_string()),
            ("hac.reduction", self.hac.reduction.to_string()),
            ("hac.gate_bias_init", self.hac.gate_bias_init.to_string()),
            ("rap.kl_coef", self.rap.kl_coef.to_string()),
            ("rap.kl_scale", self.rap.kl_scale.to_string()),
            ("rap.schedule", self.rap.schedule.to_string()),
            ("rap.anneal_horizon", self.rap.anneal_horizon.to_string()),
            ("rap.nll_form", self.rap.nll_form.to_string()),
            ("rap.kl_masking", self.rap.kl_masking.to_string()),
            ("aug.scale_min", self.aug.scale_min.to_string()),
            ("aug.scale_max", self.aug.scale_max.to_string()),
            ("aug.ratio_min", self.aug.ratio_min.to_string()),
            ("aug.ratio_max", self.aug.ratio_max.to_string()),
            ("aug.flip_p", self.aug.flip_p.to_string()),
            ("data.train", p(&self.train_path)),
            ("data.val", p(&self.val_path)),
            ("data.test", p(&self.test_path)),
        ];
        rows.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// FNV-1a of [`to_text`](Self::to_text).
    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_text().as_bytes())
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            output_size: self.image_size,
            ..self.aug.clone()
        }
    }

    pub fn model_config(&self, in_channels: usize, num_classes: usize) -> ModelConfig {
        let mut backbone = BackboneConfig::preset(self.scale, self.image_size, self.patch_size, in_channels);
        backbone.state_dim = self.state_dim;
        ModelConfig {
            backbone,
            hac: self.hac.clone(),
            hac_enabled: self.hac_enabled,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CoreError::input("batch size must be positive"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(CoreError::input(format!("val fraction must lie in (0, 1), got {}", self.val_fraction)));
        }
        self.adam.validate()?;
        self.rap.validate()?;
        self.augment_config().validate()?;
        self.model_config(3, 2).validate()
    }
}
