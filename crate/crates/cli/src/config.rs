//! `key=value` run configuration.

use std::fmt::Write as _;
use std::str::FromStr;

use coseg_core::episodes::EpisodeSpec;
use coseg_core::model::{ModelConfig, TrainConfig};
use coseg_core::tensorops::optim::AdamWConfig;

use crate::error::CliError;

/// Every tunable of a run. Unknown keys are rejected on load and every value
/// is range-checked.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub grid_size: f64,
    pub block_size: f64,
    pub max_points: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub n_prototypes: usize,
    pub hca_layers: usize,
    pub momentum: f64,
    pub dim: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub episodes: usize,
    pub min_fg_points: usize,
    pub heads: usize,
    pub fold: u8,
    pub share_calibration: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grid_size: 0.02,
            block_size: 1.0,
            max_points: 20_480,
            n_way: 1,
            k_shot: 1,
            n_prototypes: 10,
            hca_layers: 2,
            momentum: 0.995,
            dim: 32,
            lr: 1e-3,
            weight_decay: 0.01,
            episodes: 2000,
            min_fg_points: 100,
            heads: 1,
            fold: 0,
            share_calibration: false,
        }
    }
}

pub const KEYS: [&str; 17] = [
    "seed",
    "grid_size",
    "block_size",
    "max_points",
    "n_way",
    "k_shot",
    "n_prototypes",
    "hca_layers",
    "momentum",
    "dim",
    "lr",
    "weight_decay",
    "episodes",
    "min_fg_points",
    "heads",
    "fold",
    "share_calibration",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| CliError::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

impl RunConfig {
    /// Sets one key from its text value without range checks.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "grid_size" => self.grid_size = parse(key, v)?,
            "block_size" => self.block_size = parse(key, v)?,
            "max_points" => self.max_points = parse(key, v)?,
            "n_way" => self.n_way = parse(key, v)?,
            "k_shot" => self.k_shot = parse(key, v)?,
            "n_prototypes" => self.n_prototypes = parse(key, v)?,
            "hca_layers" => self.hca_layers = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "dim" => self.dim = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "episodes" => self.episodes = parse(key, v)?,
            "min_fg_points" => self.min_fg_points = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "fold" => self.fold = parse(key, v)?,
            "share_calibration" => self.share_calibration = parse(key, v)?,
            other => return Err(CliError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        for (name, v) in [
            ("grid_size", self.grid_size),
            ("block_size", self.block_size),
            ("lr", self.lr),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("max_points", self.max_points),
            ("n_way", self.n_way),
            ("k_shot", self.k_shot),
            ("n_prototypes", self.n_prototypes),
            ("hca_layers", self.hca_layers),
            ("dim", self.dim),
            ("min_fg_points", self.min_fg_points),
            ("heads", self.heads),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1], got {}",
                self.momentum
            ));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad(format!(
                "heads ({}) must divide dim ({})",
                self.heads, self.dim
            ));
        }
        if self.fold > 1 {
            return bad(format!("fold must be 0 or 1, got {}", self.fold));
        }
        Ok(())
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    /// Later lines override earlier ones.
    pub fn from_text(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {}: expected key=value, got `{line}`", i + 1))
            })?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key in [`KEYS`] order; reloads to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key}={}", self.value_of(key));
        }
        out
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "grid_size" => self.grid_size.to_string(),
            "block_size" => self.block_size.to_string(),
            "max_points" => self.max_points.to_string(),
            "n_way" => self.n_way.to_string(),
            "k_shot" => self.k_shot.to_string(),
            "n_prototypes" => self.n_prototypes.to_string(),
            "hca_layers" => self.hca_layers.to_string(),
            "momentum" => self.momentum.to_string(),
            "dim" => self.dim.to_string(),
            "lr" => self.lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "episodes" => self.episodes.to_string(),
            "min_fg_points" => self.min_fg_points.to_string(),
            "heads" => self.heads.to_string(),
            "fold" => self.fold.to_string(),
            "share_calibration" => self.share_calibration.to_string(),
            _ => unreachable!("key list and accessor agree"),
        }
    }

    pub fn episode_spec(&self) -> EpisodeSpec {
        EpisodeSpec {
            n_way: self.n_way,
            k_shot: self.k_shot,
            min_fg_points: self.min_fg_points,
            m_cap: self.max_points,
        }
    }

    pub fn model_config(&self, n_base: usize) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            n_prototypes: self.n_prototypes,
            layers: self.hca_layers,
            heads: self.heads,
            n_base,
            share_calibration: self.share_calibration,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model_config(1),
            episode: self.episode_spec(),
            episodes: self.episodes,
            optimizer: AdamWConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                ..AdamWConfig::default()
            },
            momentum: self.momentum,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn overrides_and_comments() {
        let cfg =
            RunConfig::from_text("# toy\nseed = 7\n\nlr=5e-5\nshare_calibration=true\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.lr, 5e-5);
        assert!(cfg.share_calibration);
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_and_out_of_range_rejected() {
        assert!(RunConfig::from_text("colour=red").is_err());
        assert!(RunConfig::from_text("momentum=1.5").is_err());
        assert!(RunConfig::from_text("dim=30\nheads=4").is_err());
        assert!(RunConfig::from_text("grid_size=0").is_err());
        assert!(RunConfig::from_text("n_way=0").is_err());
        assert!(RunConfig::from_text("fold=2").is_err());
        assert!(RunConfig::from_text("lr=abc").is_err());
        assert!(RunConfig::from_text("episodes").is_err());
    }
}
