//! Run configuration: defaults, validation, and the flat key=value file
//! format. Command-line flags override file values; `seed` pins every
//! stochastic choice in a run.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
    pub gpsa_prob: f64,
    pub gpsa_stages: Vec<String>,
    pub seed: u64,
    /// Channel widths of the three encoder stages.
    pub widths: [usize; 3],
    pub image_size: usize,
    pub gn_groups: usize,
    /// Fraction of the source split held out for best-checkpoint selection.
    pub val_fraction: f64,
    pub edge_blur_radius: usize,
    pub edge_normalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 0.001,
            weight_decay: 0.0005,
            momentum: 0.9,
            lr_decay_factor: 0.1,
            lr_decay_every: 20,
            epochs: 50,
            tau: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
            alpha: 0.8,
            gpsa_prob: 0.5,
            gpsa_stages: vec!["stage1".to_string(), "stage2".to_string()],
            seed: 0,
            widths: [32, 64, 128],
            image_size: 32,
            gn_groups: 8,
            val_fraction: 0.1,
            edge_blur_radius: 0,
            edge_normalize: true,
        }
    }
}

pub const STAGE_TAGS: [&str; 3] = ["stage1", "stage2", "stage3"];

impl TrainConfig {
    /// Verify every invariant, naming the offending field in the error.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::config(format!(
                "lr_decay_factor must be in (0,1], got {}",
                self.lr_decay_factor
            )));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::config("lr_decay_every must be >= 1 epoch"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(Error::config(format!("lambda1 must be >= 0, got {}", self.lambda1)));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(Error::config(format!("lambda2 must be >= 0, got {}", self.lambda2)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!(
                "alpha must satisfy 0 < alpha < 1, got {}",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.gpsa_prob) {
            return Err(Error::config(format!(
                "gpsa_prob must be in [0,1], got {}",
                self.gpsa_prob
            )));
        }
        for tag in &self.gpsa_stages {
            if !STAGE_TAGS.contains(&tag.as_str()) {
                return Err(Error::config(format!(
                    "gpsa_stages entry {:?} is not one of {:?}",
                    tag, STAGE_TAGS
                )));
            }
        }
        for (i, w) in self.widths.iter().enumerate() {
            if *w == 0 {
                return Err(Error::config(format!("widths[{}] must be >= 1", i)));
            }
            if *w % self.gn_groups != 0 {
                return Err(Error::config(format!(
                    "gn_groups {} must divide widths[{}] = {}",
                    self.gn_groups, i, w
                )));
            }
        }
        if self.gn_groups == 0 {
            return Err(Error::config("gn_groups must be >= 1"));
        }
        // three stride-2 pools need at least 8 pixels per side
        if self.image_size < 8 {
            return Err(Error::config(format!(
                "image_size must be >= 8, got {}",
                self.image_size
            )));
        }
        if !(0.0..=0.5).contains(&self.val_fraction) {
            return Err(Error::config(format!(
                "val_fraction must be in [0,0.5], got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }

    /// Parse a flat `key = value` file. `#` starts a comment; blank lines are
    /// skipped; keys mirror the TrainConfig field names; unknown keys are
    /// rejected. The result is validated.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!(
                    "{}:{}: expected `key = value`, got {:?}",
                    path.display(),
                    lineno + 1,
                    raw
                ))
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| {
                Error::config(format!("{}:{}: {}", path.display(), lineno + 1, e))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Set one field from its textual form. Used by both the file parser and
    /// CLI overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::config(format!("invalid value {:?} for {}", value, key)))
        }
        match key {
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = num(key, value)?,
            "lr_decay_every" => self.lr_decay_every = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "lambda1" => self.lambda1 = num(key, value)?,
            "lambda2" => self.lambda2 = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "gpsa_prob" => self.gpsa_prob = num(key, value)?,
            "gpsa_stages" => {
                self.gpsa_stages = value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
            }
            "seed" => self.seed = num(key, value)?,
            "widths" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|s| num::<usize>(key, s.trim()))
                    .collect::<Result<_>>()?;
                if parts.len() != 3 {
                    return Err(Error::config(format!(
                        "widths needs exactly 3 comma-separated values, got {}",
                        parts.len()
                    )));
                }
                self.widths = [parts[0], parts[1], parts[2]];
            }
            "image_size" => self.image_size = num(key, value)?,
            "gn_groups" => self.gn_groups = num(key, value)?,
            "val_fraction" => self.val_fraction = num(key, value)?,
            "edge_blur_radius" => self.edge_blur_radius = num(key, value)?,
            "edge_normalize" => self.edge_normalize = num(key, value)?,
            other => return Err(Error::config(format!("unknown config key {:?}", other))),
        }
        Ok(())
    }

    /// Learning rate for a 0-indexed epoch under the step-decay schedule.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let decays = (epoch / self.lr_decay_every) as i32;
        self.lr * self.lr_decay_factor.powi(decays)
    }

    /// Hash of the canonical JSON form, stored in checkpoints so a loaded
    /// model can verify it matches its training configuration.
    pub fn sha256_hex(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{:02x}", b)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn out_of_range_values_name_the_field() {
        let mut cfg = TrainConfig::default();
        cfg.alpha = 1.5;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("alpha"), "error should name alpha: {}", err);

        let mut cfg = TrainConfig::default();
        cfg.alpha = 0.8;
        cfg.validate().unwrap();

        let mut cfg = TrainConfig::default();
        cfg.tau = 0.0;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("tau"), "error should name tau: {}", err);

        let mut cfg = TrainConfig::default();
        cfg.gpsa_prob = 1.2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn lr_schedule_decays_every_20_epochs() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at_epoch(0), 0.001);
        assert_eq!(cfg.lr_at_epoch(19), 0.001);
        assert!((cfg.lr_at_epoch(20) - 0.0001).abs() < 1e-15);
        // the 25th epoch (0-indexed 24) sits after one decay
        assert!((cfg.lr_at_epoch(24) - 0.0001).abs() < 1e-15);
        assert!((cfg.lr_at_epoch(40) - 0.00001).abs() < 1e-15);
    }

    #[test]
    fn file_parsing_round_trips_and_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "# comment\nbatch_size = 16\nlambda1 = 0.5\ngpsa_stages = stage1\nwidths = 8,16,32\nedge_normalize = true\n",
        )
        .unwrap();
        let cfg = TrainConfig::from_file(&path).unwrap();
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.lambda1, 0.5);
        assert_eq!(cfg.gpsa_stages, vec!["stage1"]);
        assert_eq!(cfg.widths, [8, 16, 32]);

        std::fs::write(&path, "no_such_key = 1\n").unwrap();
        assert!(TrainConfig::from_file(&path).is_err());

        std::fs::write(&path, "alpha = 2.0\n").unwrap();
        assert!(TrainConfig::from_file(&path).is_err(), "file values are validated");
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = TrainConfig::default();
        let mut b = TrainConfig::default();
        assert_eq!(a.sha256_hex(), b.sha256_hex());
        b.seed = 1;
        assert_ne!(a.sha256_hex(), b.sha256_hex());
    }
}
