use std::collections::BTreeMap;

use crate::error::{RcfError, Result};

/// Training hyperparameters. Defaults are the desk-scale settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub poly_power: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub steps_stage1: usize,
    pub steps_stage2: usize,
    /// Residual bound in pixels.
    pub lambda: f64,
    pub channels: usize,
    pub seed: u64,
    pub ema_momentum: f64,
    pub w_app_crf: f64,
    pub w_motion_crf: f64,
    pub w_app_ncut: f64,
    pub w_motion_ncut: f64,
    pub symmetric_loss: bool,
    /// Use the NCut-refined semantic constraint in the second stage-2 sub-stage.
    pub semantic_constraint: bool,
    /// Backbone output channels.
    pub feature_channels: usize,
    pub head_channels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            min_lr: 1e-6,
            poly_power: 0.9,
            weight_decay: 1e-4,
            batch: 8,
            steps_stage1: 300,
            steps_stage2: 400,
            lambda: 10.0,
            channels: 4,
            seed: 0,
            ema_momentum: 0.999,
            w_app_crf: 10.0,
            w_motion_crf: 1.0,
            w_app_ncut: 2.0,
            w_motion_ncut: 0.1,
            symmetric_loss: false,
            semantic_constraint: true,
            feature_channels: 16,
            head_channels: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(RcfError::Config(format!("invalid training config: {what}")));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and >= 0");
        }
        if !(self.min_lr >= 0.0) || !(self.poly_power > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("min_lr, poly_power and weight_decay must be nonnegative (poly_power > 0)");
        }
        if self.batch == 0 {
            return bad("batch must be >= 1");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and >= 0");
        }
        if self.channels == 0 {
            return bad("channels must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return bad("ema momentum must lie in [0, 1]");
        }
        if [self.w_app_crf, self.w_motion_crf, self.w_app_ncut, self.w_motion_ncut].iter().any(|w| !(*w >= 0.0)) {
            return bad("loss weights must be >= 0");
        }
        if self.feature_channels == 0 || self.head_channels == 0 {
            return bad("layer widths must be >= 1");
        }
        Ok(())
    }

    /// Flat `key = value` lines, sorted by key.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("lr", self.lr.to_string());
        put("min_lr", self.min_lr.to_string());
        put("poly_power", self.poly_power.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("batch", self.batch.to_string());
        put("steps_stage1", self.steps_stage1.to_string());
        put("steps_stage2", self.steps_stage2.to_string());
        put("lambda", self.lambda.to_string());
        put("channels", self.channels.to_string());
        put("seed", self.seed.to_string());
        put("ema_momentum", self.ema_momentum.to_string());
        put("w_app_crf", self.w_app_crf.to_string());
        put("w_motion_crf", self.w_motion_crf.to_string());
        put("w_app_ncut", self.w_app_ncut.to_string());
        put("w_motion_ncut", self.w_motion_ncut.to_string());
        put("symmetric_loss", self.symmetric_loss.to_string());
        put("semantic_constraint", self.semantic_constraint.to_string());
        put("feature_channels", self.feature_channels.to_string());
        put("head_channels", self.head_channels.to_string());
        m
    }

    /// Applies one `key = value` override. Unknown keys are a config error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| RcfError::Config(format!("cannot parse {key} = {v:?}")))
        }
        match key {
            "lr" => self.lr = p(key, value)?,
            "min_lr" => self.min_lr = p(key, value)?,
            "poly_power" => self.poly_power = p(key, value)?,
            "weight_decay" => self.weight_decay = p(key, value)?,
            "batch" => self.batch = p(key, value)?,
            "steps_stage1" => self.steps_stage1 = p(key, value)?,
            "steps_stage2" => self.steps_stage2 = p(key, value)?,
            "lambda" => self.lambda = p(key, value)?,
            "channels" => self.channels = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "ema_momentum" => self.ema_momentum = p(key, value)?,
            "w_app_crf" => self.w_app_crf = p(key, value)?,
            "w_motion_crf" => self.w_motion_crf = p(key, value)?,
            "w_app_ncut" => self.w_app_ncut = p(key, value)?,
            "w_motion_ncut" => self.w_motion_ncut = p(key, value)?,
            "symmetric_loss" => self.symmetric_loss = p(key, value)?,
            "semantic_constraint" => self.semantic_constraint = p(key, value)?,
            "feature_channels" => self.feature_channels = p(key, value)?,
            "head_channels" => self.head_channels = p(key, value)?,
            other => return Err(RcfError::Config(format!("unknown training key {other:?}"))),
        }
        Ok(())
    }

    pub fn from_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_roundtrip() {
        let cfg = TrainConfig { lr: 1.5e-4, channels: 6, symmetric_loss: true, seed: 99, ..Default::default() };
        let kv = cfg.to_kv();
        let back = TrainConfig::from_kv(kv.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(TrainConfig { ema_momentum: 1.5, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().set("nope", "1").is_err());
        assert!(TrainConfig::default().set("lr", "abc").is_err());
    }
}
