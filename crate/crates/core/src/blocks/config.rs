use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture and pretraining-objective settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of structural blocks `T`.
    pub depth: usize,
    /// Token and state width `D`.
    pub width: usize,
    /// Inner scan width `E`.
    pub inner: usize,
    /// Number of spatial states `M`.
    pub states: usize,
    /// Number of point groups `N`.
    pub groups: usize,
    /// Points per group `K`.
    pub group_size: usize,
    /// Light-convolution neighbors over states.
    pub k_h: usize,
    /// Light-convolution neighbors over tokens.
    pub k_x: usize,
    pub mask_ratio: f64,
    pub decoder_depth: usize,
    /// Weight of the state consistency loss.
    pub lambda: f64,
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 12,
            width: 384,
            inner: 768,
            states: 16,
            groups: 64,
            group_size: 32,
            k_h: 4,
            k_x: 8,
            mask_ratio: 0.6,
            decoder_depth: 4,
            lambda: 2.0,
            ema_decay: 0.999,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The small configuration used by the test suites and toy runs.
    pub fn tiny() -> Self {
        Self { depth: 2, width: 16, inner: 32, states: 4, groups: 8, group_size: 8, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth", self.depth),
            ("width", self.width),
            ("inner", self.inner),
            ("states", self.states),
            ("groups", self.groups),
            ("group_size", self.group_size),
            ("k_h", self.k_h),
            ("k_x", self.k_x),
            ("decoder_depth", self.decoder_depth),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Argument(format!("config: {name} must be positive")));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Argument(format!("config: mask_ratio {} outside [0, 1)", self.mask_ratio)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Argument(format!("config: lambda {} must be finite and >= 0", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Argument(format!("config: ema_decay {} outside [0, 1]", self.ema_decay)));
        }
        Ok(())
    }

    /// Number of masked groups: `ratio * N` rounded half up.
    pub fn mask_count(&self) -> usize {
        (self.mask_ratio * self.groups as f64 + 0.5).floor() as usize
    }
}

/// Optimization schedule and data settings for pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Write a checkpoint every this many epochs (0 disables periodic saves).
    pub checkpoint_every: usize,
    /// Points per generated cloud.
    pub points: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.05,
            warmup_epochs: 10,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            checkpoint_every: 10,
            points: 1024,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.points == 0 {
            return Err(Error::Argument("config: batch_size and points must be positive".into()));
        }
        let rates = [self.lr, self.weight_decay, self.eps];
        if rates.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Argument("config: optimizer settings out of range".into()));
        }
        Ok(())
    }
}

/// A complete run configuration as stored in TOML.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn tiny() -> Self {
        Self { model: ModelConfig::tiny(), train: TrainConfig { batch_size: 4, points: 128, ..TrainConfig::default() } }
    }

    /// Parses and validates a TOML document; unknown keys are rejected and missing keys take defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_mask_rounding() {
        let c = ModelConfig::default();
        assert_eq!((c.depth, c.width, c.states, c.groups, c.group_size), (12, 384, 16, 64, 32));
        assert_eq!(c.mask_count(), 38);
        let t = ModelConfig { mask_ratio: 0.0, ..ModelConfig::tiny() };
        assert_eq!(t.mask_count(), 0);
        // 0.5 * 5 = 2.5 rounds up
        assert_eq!(ModelConfig { groups: 5, mask_ratio: 0.5, ..ModelConfig::tiny() }.mask_count(), 3);
    }

    #[test]
    fn missing_keys_default_and_unknown_keys_fail() {
        let c = Config::parse("[model]\ndepth = 3\n").unwrap();
        assert_eq!(c.model.depth, 3);
        assert_eq!(c.model.width, 384);
        assert_eq!(c.train, TrainConfig::default());
        assert!(matches!(Config::parse("[model]\ndepht = 3\n"), Err(Error::Format(_))));
        assert!(matches!(Config::parse("[modle]\n"), Err(Error::Format(_))));
    }

    #[test]
    fn validation_rejects_bad_values() {
        assert!(Config::parse("[model]\nmask_ratio = 1.0\n").is_err());
        assert!(Config::parse("[model]\nstates = 0\n").is_err());
        assert!(Config::parse("[model]\nlambda = -1.0\n").is_err());
        assert!(Config::parse("[train]\nbatch_size = 0\n").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = Config::tiny();
        assert_eq!(Config::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn shipped_presets_match_builtins() {
        let full = Config::parse(include_str!("../../../../configs/default.toml")).unwrap();
        assert_eq!(full, Config::default());
        let tiny = Config::parse(include_str!("../../../../configs/tiny.toml")).unwrap();
        assert_eq!(tiny.model, ModelConfig::tiny());
        assert_eq!(tiny.train, TrainConfig { epochs: 200, ..Config::tiny().train });
    }
}
