use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainError;
use crate::data::AugmentationConfig;

/// First 16 hex digits of the SHA-256 of `text`.
pub fn content_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Arithmetic width used for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl FromStr for Precision {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(TrainError::Config(format!("precision must be f32 or f64, got {s:?}"))),
        }
    }
}

/// Experiment settings, read from and written to `key = value` text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub lr0: f64,
    pub plateau_patience: usize,
    pub lr_factor: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    /// Expansion orders to compare; 0 is the plain network.
    pub m: Vec<usize>,
    pub seeds: Vec<u64>,
    pub augmentation: AugmentationConfig,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub split_seed: u64,
    pub patch_size: usize,
    pub patch_stride: usize,
    pub batch_norm: bool,
    pub precision: Precision,
    pub prenormalized: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 30_000,
            lr0: 1e-3,
            plateau_patience: 20,
            lr_factor: 0.5,
            lr_min: 1e-6,
            weight_decay: 1e-4,
            early_stop_patience: 40,
            batch_size: 8,
            m: vec![0, 2, 3],
            seeds: (0..10).collect(),
            augmentation: AugmentationConfig::default(),
            val_fraction: 0.2,
            test_fraction: 0.2,
            split_seed: 0,
            patch_size: 64,
            patch_stride: 64,
            batch_norm: false,
            precision: Precision::F32,
            prenormalized: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, TrainError> {
    value
        .parse()
        .map_err(|_| TrainError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, TrainError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut c = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected key = value", n + 1)))?;
            c.set(key.trim(), value.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Sets one field by its config-file name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        let a = &mut self.augmentation;
        match key {
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "lr0" => self.lr0 = parse(key, value)?,
            "plateau_patience" => self.plateau_patience = parse(key, value)?,
            "lr_factor" => self.lr_factor = parse(key, value)?,
            "lr_min" => self.lr_min = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "early_stop_patience" => self.early_stop_patience = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "m" => self.m = parse_list(key, value)?,
            "seeds" => self.seeds = parse_list(key, value)?,
            "shift_limit" => a.shift_limit = parse(key, value)?,
            "scale_limit" => a.scale_limit = parse(key, value)?,
            "rotation_limit" => a.rotation_limit = parse(key, value)?,
            "horizontal_flip" => a.horizontal_flip = parse(key, value)?,
            "vertical_flip" => a.vertical_flip = parse(key, value)?,
            "augment_probability" => a.probability = parse(key, value)?,
            "val_fraction" => self.val_fraction = parse(key, value)?,
            "test_fraction" => self.test_fraction = parse(key, value)?,
            "split_seed" => self.split_seed = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "patch_stride" => self.patch_stride = parse(key, value)?,
            "batch_norm" => self.batch_norm = parse(key, value)?,
            "precision" => self.precision = value.parse()?,
            "prenormalized" => self.prenormalized = parse(key, value)?,
            _ => return Err(TrainError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::Config(msg.to_string()));
        if self.max_epochs == 0 || self.plateau_patience == 0 || self.early_stop_patience == 0 || self.batch_size == 0 {
            return bad("epoch, patience and batch settings must be positive");
        }
        let positive = [self.lr0, self.lr_min, self.lr_factor];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.lr_factor >= 1.0 {
            return bad("learning rates must be positive and lr_factor in (0, 1)");
        }
        if self.lr_min > self.lr0 {
            return bad("lr_min must not exceed lr0");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.val_fraction) || !(0.0..1.0).contains(&self.test_fraction) {
            return bad("fractions must lie in [0, 1)");
        }
        if self.m.is_empty() || self.seeds.is_empty() {
            return bad("m and seeds must be non-empty");
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(8) || self.patch_stride == 0 {
            return bad("patch_size must be a positive multiple of 8 and patch_stride positive");
        }
        for &m in &self.m {
            if !matches!(m, 0 | 2 | 3) {
                log::warn!("expansion order m = {m} is outside the usual {{0, 2, 3}}");
            }
        }
        self.augmentation.validate()?;
        Ok(())
    }

    /// Canonical `key = value` rendering; parsing it yields the same config.
    pub fn to_text(&self) -> String {
        let a = &self.augmentation;
        let fields: [(&str, String); 24] = [
            ("max_epochs", self.max_epochs.to_string()),
            ("lr0", self.lr0.to_string()),
            ("plateau_patience", self.plateau_patience.to_string()),
            ("lr_factor", self.lr_factor.to_string()),
            ("lr_min", self.lr_min.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("early_stop_patience", self.early_stop_patience.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("m", join(&self.m)),
            ("seeds", join(&self.seeds)),
            ("shift_limit", a.shift_limit.to_string()),
            ("scale_limit", a.scale_limit.to_string()),
            ("rotation_limit", a.rotation_limit.to_string()),
            ("horizontal_flip", a.horizontal_flip.to_string()),
            ("vertical_flip", a.vertical_flip.to_string()),
            ("augment_probability", a.probability.to_string()),
            ("val_fraction", self.val_fraction.to_string()),
            ("test_fraction", self.test_fraction.to_string()),
            ("split_seed", self.split_seed.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("patch_stride", self.patch_stride.to_string()),
            ("batch_norm", self.batch_norm.to_string()),
            ("precision", self.precision.as_str().to_string()),
            ("prenormalized", self.prenormalized.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in fields {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Content hash of [`Self::to_text`].
    pub fn hash(&self) -> String {
        content_hash(&self.to_text())
    }
}
