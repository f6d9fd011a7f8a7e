use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::ContrastiveConfig;

/// Optimization and schedule settings for the three training stages.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub iters_warmup: usize,
    pub iters_adapt: usize,
    pub iters_selftrain: usize,
    pub source_batch: usize,
    pub target_batch: usize,
    pub lambda: f64,
    pub temperature: f64,
    pub alpha: f64,
    /// Feature-space thresholds are recalibrated every this many adaptation
    /// iterations.
    pub threshold_interval: usize,
    pub seed: u64,
    pub augment_flip: bool,
    pub augment_jitter: bool,
    pub source_contrastive: bool,
    pub target_contrastive: bool,
    pub feature_dim: usize,
    /// Log an evaluation every this many iterations (0 = stage ends only).
    pub eval_every: usize,
    /// Emit a checkpoint every this many iterations (0 = stage ends only).
    pub checkpoint_every: usize,
    pub calib_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Desk-scale defaults for 64x64 synthetic scenes on one CPU core.
    pub fn desk() -> Self {
        TrainConfig {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            iters_warmup: 2000,
            iters_adapt: 1500,
            iters_selftrain: 500,
            source_batch: 2,
            target_batch: 2,
            lambda: 1.0,
            temperature: 0.5,
            alpha: 0.1,
            threshold_interval: 500,
            seed: 0,
            augment_flip: true,
            augment_jitter: true,
            source_contrastive: true,
            target_contrastive: true,
            feature_dim: 32,
            eval_every: 0,
            checkpoint_every: 0,
            calib_batch: 8,
        }
    }

    /// Optimizer settings of the full-scale recipe: lr 2.5e-4, batch 4 + 4.
    pub fn full_scale() -> Self {
        TrainConfig {
            lr0: 2.5e-4,
            source_batch: 4,
            target_batch: 4,
            ..Self::desk()
        }
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            temperature: self.temperature,
            lambda: self.lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr0 > 0.0) {
            return fail("lr0 must be positive");
        }
        if !(self.poly_power > 0.0) {
            return fail("poly_power must be positive");
        }
        if self.source_batch == 0 || self.target_batch == 0 {
            return fail("batch counts must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail("alpha must lie in [0, 1]");
        }
        if !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) {
            return fail("momentum and weight_decay must be nonnegative");
        }
        if self.feature_dim == 0 || self.calib_batch == 0 || self.threshold_interval == 0 {
            return fail("feature_dim, calib_batch and threshold_interval must be positive");
        }
        self.contrastive().validate()
    }

    /// Canonical `(key, value)` pairs.
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr0", self.lr0.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("poly_power", self.poly_power.to_string()),
            ("iters_warmup", self.iters_warmup.to_string()),
            ("iters_adapt", self.iters_adapt.to_string()),
            ("iters_selftrain", self.iters_selftrain.to_string()),
            ("source_batch", self.source_batch.to_string()),
            ("target_batch", self.target_batch.to_string()),
            ("lambda", self.lambda.to_string()),
            ("tau", self.temperature.to_string()),
            ("alpha", self.alpha.to_string()),
            ("threshold_interval", self.threshold_interval.to_string()),
            ("seed", self.seed.to_string()),
            ("augment_flip", self.augment_flip.to_string()),
            ("augment_jitter", self.augment_jitter.to_string()),
            ("source_contrastive", self.source_contrastive.to_string()),
            ("target_contrastive", self.target_contrastive.to_string()),
            ("feature_dim", self.feature_dim.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("calib_batch", self.calib_batch.to_string()),
        ]
    }

    /// Sets one key; returns `Ok(false)` when the key is not a training key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for `{key}`")))
        }
        match key {
            "lr0" => self.lr0 = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "poly_power" => self.poly_power = num(key, value)?,
            "iters_warmup" => self.iters_warmup = num(key, value)?,
            "iters_adapt" => self.iters_adapt = num(key, value)?,
            "iters_selftrain" => self.iters_selftrain = num(key, value)?,
            "source_batch" => self.source_batch = num(key, value)?,
            "target_batch" => self.target_batch = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "tau" => self.temperature = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "threshold_interval" => self.threshold_interval = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "augment_flip" => self.augment_flip = num(key, value)?,
            "augment_jitter" => self.augment_jitter = num(key, value)?,
            "source_contrastive" => self.source_contrastive = num(key, value)?,
            "target_contrastive" => self.target_contrastive = num(key, value)?,
            "feature_dim" => self.feature_dim = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "calib_batch" => self.calib_batch = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Hash of every key that influences the training trajectory.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.to_kv() {
            if matches!(k, "eval_every" | "checkpoint_every") {
                continue;
            }
            h.update(format!("{k}={v}\n"));
        }
        h.finalize()[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// `lr0 * (1 - iter / max_iters)^power`.
pub fn poly_lr(iter: usize, max_iters: usize, lr0: f64, power: f64) -> f64 {
    if max_iters == 0 {
        return 0.0;
    }
    let frac = (iter.min(max_iters) as f64) / max_iters as f64;
    lr0 * (1.0 - frac).powf(power)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule_points() {
        let lr0 = TrainConfig::full_scale().lr0;
        assert_eq!(poly_lr(0, 100, lr0, 0.9), 2.5e-4);
        assert_eq!(poly_lr(100, 100, lr0, 0.9), 0.0);
        let mid = poly_lr(50, 100, lr0, 0.9);
        assert!((mid - 2.5e-4 * 0.5f64.powf(0.9)).abs() < 1e-18);
        assert!((mid - 1.3397e-4).abs() < 1e-8);
    }

    #[test]
    fn set_round_trips_every_key() {
        let mut cfg = TrainConfig::desk();
        let original = cfg.clone();
        for (k, v) in original.to_kv() {
            assert!(cfg.set(k, &v).unwrap(), "{k}");
        }
        assert_eq!(cfg, original);
        assert!(!cfg.set("nope", "1").unwrap());
        assert!(cfg.set("lambda", "abc").is_err());
    }

    #[test]
    fn hash_ignores_logging_cadence() {
        let a = TrainConfig::desk();
        let mut b = a.clone();
        b.eval_every = 17;
        assert_eq!(a.hash(), b.hash());
        b.lambda = 0.5;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::desk().validate().is_ok());
        let mut c = TrainConfig::desk();
        c.temperature = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk();
        c.target_batch = 0;
        assert!(c.validate().is_err());
    }
}
