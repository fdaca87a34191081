use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Hyperparameters for one training run.
///
/// `Default` is the published recipe: SGD with Nesterov momentum 0.9, batch
/// 60, lr 1e-3 decayed exponentially to 1e-6 over 20 epochs, at most 100
/// epochs with patience 15, and loss weights κ = 2, γ1 = 1, γ2 = 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub kappa: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    /// Symmetric Beta parameter for the mixing coefficient α.
    pub mix_lambda: f64,
    /// Probability of an intra-domain partner (β = 1).
    pub gamma_mix: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub decay_epochs: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
    /// Latent dimension m; `None` takes it from the semantic table.
    pub latent_dim: Option<usize>,
    pub widths: Vec<usize>,
    /// Cap on k for the validation mAP@k.
    pub val_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            kappa: 2.0,
            gamma1: 1.0,
            gamma2: 1.0,
            mix_lambda: 2.0,
            gamma_mix: 0.5,
            lr_start: 1e-3,
            lr_end: 1e-6,
            decay_epochs: 20,
            max_epochs: 100,
            patience: 15,
            batch_size: 60,
            momentum: 0.9,
            seed: 0,
            latent_dim: None,
            widths: vec![64, 64],
            val_k: 200,
        }
    }
}

impl RunConfig {
    /// Settings sized for the bundled synthetic datasets: a larger step size
    /// and a shorter schedule than the published recipe, which assumes a
    /// pretrained backbone.
    pub fn desk() -> Self {
        Self {
            lr_start: 0.05,
            lr_end: 5e-4,
            decay_epochs: 15,
            max_epochs: 20,
            patience: 8,
            batch_size: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let non_negative = [("kappa", self.kappa), ("gamma1", self.gamma1), ("gamma2", self.gamma2)];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be a non-negative real, got {v}")));
            }
        }
        if !(self.mix_lambda.is_finite() && self.mix_lambda > 0.0) {
            return Err(Error::Config(format!("mix_lambda must be positive, got {}", self.mix_lambda)));
        }
        if !(0.0..=1.0).contains(&self.gamma_mix) {
            return Err(Error::Config(format!("gamma_mix must lie in [0, 1], got {}", self.gamma_mix)));
        }
        if !(self.lr_start.is_finite() && self.lr_start > 0.0 && self.lr_end > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.lr_end > self.lr_start {
            return Err(Error::Config(format!(
                "lr_end ({}) exceeds lr_start ({})",
                self.lr_end, self.lr_start
            )));
        }
        for (name, v) in [
            ("decay_epochs", self.decay_epochs),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("val_k", self.val_k),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience ({}) exceeds max_epochs ({})",
                self.patience, self.max_epochs
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for mixup partners".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.latent_dim == Some(0) || self.widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of `base`. Blank lines and `#`
    /// comments are skipped; unknown keys are rejected.
    pub fn parse_kv(text: &str, base: RunConfig) -> Result<RunConfig> {
        let mut cfg = base;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "kappa" => self.kappa = num(key, value)?,
            "gamma1" => self.gamma1 = num(key, value)?,
            "gamma2" => self.gamma2 = num(key, value)?,
            "mix_lambda" | "lambda" => self.mix_lambda = num(key, value)?,
            "gamma_mix" => self.gamma_mix = num(key, value)?,
            "lr_start" => self.lr_start = num(key, value)?,
            "lr_end" => self.lr_end = num(key, value)?,
            "decay_epochs" => self.decay_epochs = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "val_k" => self.val_k = num(key, value)?,
            "latent_dim" => {
                self.latent_dim = match value {
                    "auto" | "" => None,
                    v => Some(num(key, v)?),
                }
            }
            "widths" => {
                self.widths = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|w| num(key, w.trim()))
                        .collect::<Result<_>>()?
                }
            }
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Inverse of [`RunConfig::parse_kv`].
    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        let widths: Vec<String> = self.widths.iter().map(ToString::to_string).collect();
        let latent = self.latent_dim.map_or("auto".to_string(), |m| m.to_string());
        let _ = writeln!(out, "kappa = {}", self.kappa);
        let _ = writeln!(out, "gamma1 = {}", self.gamma1);
        let _ = writeln!(out, "gamma2 = {}", self.gamma2);
        let _ = writeln!(out, "mix_lambda = {}", self.mix_lambda);
        let _ = writeln!(out, "gamma_mix = {}", self.gamma_mix);
        let _ = writeln!(out, "lr_start = {}", self.lr_start);
        let _ = writeln!(out, "lr_end = {}", self.lr_end);
        let _ = writeln!(out, "decay_epochs = {}", self.decay_epochs);
        let _ = writeln!(out, "max_epochs = {}", self.max_epochs);
        let _ = writeln!(out, "patience = {}", self.patience);
        let _ = writeln!(out, "batch_size = {}", self.batch_size);
        let _ = writeln!(out, "momentum = {}", self.momentum);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "latent_dim = {latent}");
        let _ = writeln!(out, "widths = {}", widths.join(","));
        let _ = writeln!(out, "val_k = {}", self.val_k);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_published_recipe() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.lr_start, 1e-3);
        assert_eq!(cfg.lr_end, 1e-6);
        assert_eq!(cfg.decay_epochs, 20);
        assert_eq!(cfg.max_epochs, 100);
        assert_eq!(cfg.patience, 15);
        assert_eq!(cfg.batch_size, 60);
        assert_eq!(cfg.momentum, 0.9);
        assert_eq!(cfg.gamma2, 1.0);
        cfg.validate().unwrap();
        RunConfig::desk().validate().unwrap();
    }

    #[test]
    fn kv_round_trip() {
        let mut cfg = RunConfig::desk();
        cfg.widths = vec![8, 4];
        cfg.latent_dim = Some(6);
        cfg.kappa = 1.5;
        let parsed = RunConfig::parse_kv(&cfg.to_kv_string(), RunConfig::default()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn invariants_are_enforced() {
        let base = RunConfig::default;
        assert!(RunConfig::parse_kv("batch_size = 1", base()).is_err());
        assert!(RunConfig::parse_kv("lr_end = 1", base()).is_err());
        assert!(RunConfig::parse_kv("patience = 200", base()).is_err());
        assert!(RunConfig::parse_kv("momentum = 1.0", base()).is_err());
        assert!(RunConfig::parse_kv("bogus = 3", base()).is_err());
        assert!(RunConfig::parse_kv("kappa 3", base()).is_err());
        let cfg = RunConfig::parse_kv("# comment\n\nkappa = 1 # inline\n", base()).unwrap();
        assert_eq!(cfg.kappa, 1.0);
    }
}
