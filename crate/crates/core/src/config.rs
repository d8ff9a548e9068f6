//! Model and training configuration, plus the flat `key=value` text format
//! used by config files and checkpoint manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Architecture hyper-parameters shared by all networks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Image height in pixels; must be divisible by `2^encoder_depth`.
    pub height: usize,
    /// Image width in pixels; must be divisible by `2^encoder_depth`.
    pub width: usize,
    /// Channels of the spatial anatomy factor.
    pub channels: usize,
    /// Dimensions of the Gaussian modality factor.
    pub latent_dims: usize,
    /// Foreground segmentation classes (the prediction adds a background channel).
    pub num_classes: usize,
    /// Down/up-sampling stages of the anatomy encoder.
    pub encoder_depth: usize,
    /// Filters of the first encoder stage; doubled per stage.
    pub base_filters: usize,
    /// Number of feature-wise modulation stages in the decoder.
    pub film_stages: usize,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 8,
            latent_dims: 8,
            num_classes: 3,
            encoder_depth: 3,
            base_filters: 32,
            film_stages: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let div = 1usize << self.encoder_depth;
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidConfig("image size must be positive".into()));
        }
        if self.height % div != 0 || self.width % div != 0 {
            return Err(Error::InvalidConfig(format!(
                "height {} and width {} must be divisible by 2^encoder_depth = {}",
                self.height, self.width, div
            )));
        }
        if self.channels < self.num_classes {
            return Err(Error::InvalidConfig(format!(
                "anatomy channels ({}) must be >= segmentation classes ({})",
                self.channels, self.num_classes
            )));
        }
        if self.latent_dims == 0 {
            return Err(Error::InvalidConfig("latent_dims must be >= 1".into()));
        }
        if self.film_stages == 0 {
            return Err(Error::InvalidConfig("film_stages must be >= 1".into()));
        }
        if self.encoder_depth == 0 || self.base_filters == 0 {
            return Err(Error::InvalidConfig(
                "encoder_depth and base_filters must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Weights of the composite training objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub kl: f32,
    pub segm: f32,
    pub adv: f32,
    pub rec: f32,
    pub z_rec: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            kl: 0.01,
            segm: 10.0,
            adv: 10.0,
            rec: 1.0,
            z_rec: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.kl, self.segm, self.adv, self.rec, self.z_rec];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Which loss terms drive training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Full objective: reconstruction, KL, modality-factor cycle, Dice and mask adversary.
    Sdnet,
    /// Plain supervised segmentation (Dice only, no discriminator).
    Supervised,
    /// Dice plus mask adversary, no reconstruction path.
    Gan,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Sdnet => "sdnet",
            TrainMode::Supervised => "supervised",
            TrainMode::Gan => "gan",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sdnet" => Ok(TrainMode::Sdnet),
            "supervised" | "supervised_baseline" => Ok(TrainMode::Supervised),
            "gan" | "gan_baseline" => Ok(TrainMode::Gan),
            other => Err(Error::InvalidConfig(format!(
                "unknown mode '{other}' (expected sdnet|supervised|gan)"
            ))),
        }
    }
}

/// Optimization schedule and mode.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    /// Learning rate at epoch e is `learning_rate / (1 + decay * e)`.
    pub lr_decay_per_epoch: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early stopping: epochs without validation improvement before stopping.
    pub patience: usize,
    pub weights: LossWeights,
    pub mode: TrainMode,
    /// Rotation augmentation of training batches.
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            lr_decay_per_epoch: 1e-4,
            batch_size: 4,
            max_epochs: 100,
            patience: 10,
            weights: LossWeights::default(),
            mode: TrainMode::Sdnet,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.lr_decay_per_epoch >= 0.0) {
            return Err(Error::InvalidConfig(
                "learning rate must be positive and decay non-negative".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::InvalidConfig("patience must be >= 1".into()));
        }
        self.weights.validate()
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f32 {
        self.learning_rate / (1.0 + self.lr_decay_per_epoch * epoch as f32)
    }
}

/// Flat `key=value` document: one pair per line, `#` comments, later keys win.
#[derive(Debug, Clone, Default)]
pub struct KvMap(BTreeMap<String, String>);

impl KvMap {
    pub fn new() -> Self {
        Self(BTreeMap::new())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected key=value", lineno + 1))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self(map))
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.0.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(|s| s.as_str())
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                Error::InvalidConfig(format!("key '{key}': cannot parse value '{v}'"))
            }),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(|s| s.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.0 {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

macro_rules! kv_read {
    ($kv:expr, $key:expr, $slot:expr) => {
        if let Some(v) = $kv.get_parsed($key)? {
            $slot = v;
        }
    };
}

impl ModelConfig {
    pub fn to_kv(&self, kv: &mut KvMap) {
        kv.set("model.height", self.height);
        kv.set("model.width", self.width);
        kv.set("model.channels", self.channels);
        kv.set("model.latent_dims", self.latent_dims);
        kv.set("model.num_classes", self.num_classes);
        kv.set("model.encoder_depth", self.encoder_depth);
        kv.set("model.base_filters", self.base_filters);
        kv.set("model.film_stages", self.film_stages);
        kv.set("model.seed", self.seed);
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut cfg = Self::default();
        kv_read!(kv, "model.height", cfg.height);
        kv_read!(kv, "model.width", cfg.width);
        kv_read!(kv, "model.channels", cfg.channels);
        kv_read!(kv, "model.latent_dims", cfg.latent_dims);
        kv_read!(kv, "model.num_classes", cfg.num_classes);
        kv_read!(kv, "model.encoder_depth", cfg.encoder_depth);
        kv_read!(kv, "model.base_filters", cfg.base_filters);
        kv_read!(kv, "model.film_stages", cfg.film_stages);
        kv_read!(kv, "model.seed", cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }
}

impl TrainConfig {
    pub fn to_kv(&self, kv: &mut KvMap) {
        kv.set("train.learning_rate", self.learning_rate);
        kv.set("train.lr_decay_per_epoch", self.lr_decay_per_epoch);
        kv.set("train.batch_size", self.batch_size);
        kv.set("train.max_epochs", self.max_epochs);
        kv.set("train.patience", self.patience);
        kv.set("train.mode", self.mode.as_str());
        kv.set("train.augment", self.augment);
        kv.set("train.seed", self.seed);
        kv.set("train.lambda_kl", self.weights.kl);
        kv.set("train.lambda_segm", self.weights.segm);
        kv.set("train.lambda_adv", self.weights.adv);
        kv.set("train.lambda_rec", self.weights.rec);
        kv.set("train.lambda_z_rec", self.weights.z_rec);
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut cfg = Self::default();
        kv_read!(kv, "train.learning_rate", cfg.learning_rate);
        kv_read!(kv, "train.lr_decay_per_epoch", cfg.lr_decay_per_epoch);
        kv_read!(kv, "train.batch_size", cfg.batch_size);
        kv_read!(kv, "train.max_epochs", cfg.max_epochs);
        kv_read!(kv, "train.patience", cfg.patience);
        kv_read!(kv, "train.augment", cfg.augment);
        kv_read!(kv, "train.seed", cfg.seed);
        if let Some(mode) = kv.get("train.mode") {
            cfg.mode = TrainMode::parse(mode)?;
        }
        kv_read!(kv, "train.lambda_kl", cfg.weights.kl);
        kv_read!(kv, "train.lambda_segm", cfg.weights.segm);
        kv_read!(kv, "train.lambda_adv", cfg.weights.adv);
        kv_read!(kv, "train.lambda_rec", cfg.weights.rec);
        kv_read!(kv, "train.lambda_z_rec", cfg.weights.z_rec);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_weights_match_documented_values() {
        let w = LossWeights::default();
        assert_eq!(
            (w.kl, w.segm, w.adv, w.rec, w.z_rec),
            (0.01, 10.0, 10.0, 1.0, 1.0)
        );
    }

    #[test]
    fn lr_schedule_is_decreasing_and_starts_at_base() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at_epoch(0), 1e-4);
        let mut prev = f32::INFINITY;
        for e in 0..50 {
            let lr = cfg.lr_at_epoch(e);
            assert!(lr < prev);
            prev = lr;
        }
    }

    #[test]
    fn size_divisibility_enforced() {
        let cfg = ModelConfig {
            height: 60,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn kv_round_trip() {
        let mut kv = KvMap::new();
        let model = ModelConfig {
            height: 32,
            width: 32,
            channels: 9,
            latent_dims: 4,
            num_classes: 2,
            encoder_depth: 2,
            base_filters: 8,
            film_stages: 3,
            seed: 17,
        };
        let train = TrainConfig {
            mode: TrainMode::Gan,
            max_epochs: 7,
            ..TrainConfig::default()
        };
        model.to_kv(&mut kv);
        train.to_kv(&mut kv);
        let parsed = KvMap::parse(&kv.to_text()).unwrap();
        assert_eq!(ModelConfig::from_kv(&parsed).unwrap(), model);
        assert_eq!(TrainConfig::from_kv(&parsed).unwrap(), train);
    }

    #[test]
    fn negative_weights_rejected() {
        let w = LossWeights {
            segm: -1.0,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
    }
}
