use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::model::ModelConfig;

/// Prefix for environment overrides, e.g. `SCPC_LR=0.002`.
pub const ENV_PREFIX: &str = "SCPC_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        })
    }
}

impl FromStr for Optimizer {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            _ => Err(format!("expected sgd or adam, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub thres: f64,
    pub add_nsc_epoch: usize,
    pub k_frame: usize,
    pub k_seg: usize,
    pub p: usize,
    pub q: usize,
    pub seed: u64,
    /// Write an `epoch_NNN.ckpt` snapshot every this many epochs (0 disables).
    pub checkpoint_interval: usize,
    /// Global gradient norm cap (0 disables).
    pub clip_norm: f64,
    /// Prominences used for the per-epoch validation scores.
    pub phoneme_prominence: f64,
    pub word_prominence: f64,
    pub normalize_word_scores: bool,
    /// Resample input audio to 16 kHz instead of rejecting other rates.
    pub resample: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            optimizer: Optimizer::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            epochs: 10,
            thres: 0.05,
            add_nsc_epoch: 2,
            k_frame: 10,
            k_seg: 5,
            p: 64,
            q: 64,
            seed: 0,
            checkpoint_interval: 1,
            clip_norm: 5.0,
            phoneme_prominence: 0.1,
            word_prominence: 0.1,
            normalize_word_scores: false,
            resample: false,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "lr",
    "optimizer",
    "beta1",
    "beta2",
    "eps",
    "batch_size",
    "epochs",
    "thres",
    "add_nsc_epoch",
    "k_frame",
    "k_seg",
    "p",
    "q",
    "seed",
    "checkpoint_interval",
    "clip_norm",
    "phoneme_prominence",
    "word_prominence",
    "normalize_word_scores",
    "resample",
];

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { p: self.p, q: self.q }
    }

    /// Defaults overridden by `text`; unknown keys are rejected.
    pub fn from_kv(text: &str) -> Result<Self> {
        Self::from_map(&KvMap::parse(text)?)
    }

    /// Like [`TrainConfig::from_kv`], then applies `SCPC_<KEY>` variables.
    pub fn from_kv_with_env(text: &str) -> Result<Self> {
        let mut kv = KvMap::parse(text)?;
        for key in CONFIG_KEYS {
            if let Ok(v) = std::env::var(format!("{ENV_PREFIX}{}", key.to_uppercase())) {
                kv.insert(*key, v);
            }
        }
        Self::from_map(&kv)
    }

    pub fn from_map(kv: &KvMap) -> Result<Self> {
        kv.reject_unknown(CONFIG_KEYS)?;
        let mut c = Self::default();
        kv.read("lr", &mut c.lr)?;
        kv.read("optimizer", &mut c.optimizer)?;
        kv.read("beta1", &mut c.beta1)?;
        kv.read("beta2", &mut c.beta2)?;
        kv.read("eps", &mut c.eps)?;
        kv.read("batch_size", &mut c.batch_size)?;
        kv.read("epochs", &mut c.epochs)?;
        kv.read("thres", &mut c.thres)?;
        kv.read("add_nsc_epoch", &mut c.add_nsc_epoch)?;
        kv.read("k_frame", &mut c.k_frame)?;
        kv.read("k_seg", &mut c.k_seg)?;
        kv.read("p", &mut c.p)?;
        kv.read("q", &mut c.q)?;
        kv.read("seed", &mut c.seed)?;
        kv.read("checkpoint_interval", &mut c.checkpoint_interval)?;
        kv.read("clip_norm", &mut c.clip_norm)?;
        kv.read("phoneme_prominence", &mut c.phoneme_prominence)?;
        kv.read("word_prominence", &mut c.word_prominence)?;
        kv.read("normalize_word_scores", &mut c.normalize_word_scores)?;
        kv.read("resample", &mut c.resample)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if !(0.0..=1.0).contains(&self.thres) {
            return Err(Error::Threshold(self.thres));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad(format!("adam settings beta1={} beta2={} eps={}", self.beta1, self.beta2, self.eps));
        }
        if self.batch_size == 0 || self.p == 0 || self.q == 0 || self.k_frame == 0 || self.k_seg == 0 {
            return bad("batch_size, p, q, k_frame and k_seg must be at least 1".into());
        }
        if !(self.clip_norm >= 0.0) || self.phoneme_prominence < 0.0 || self.word_prominence < 0.0 {
            return bad("clip_norm and prominences must be non-negative".into());
        }
        Ok(())
    }

    /// Every key with its resolved value, readable by [`TrainConfig::from_kv`].
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: &dyn fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("lr", &self.lr);
        put("optimizer", &self.optimizer);
        put("beta1", &self.beta1);
        put("beta2", &self.beta2);
        put("eps", &self.eps);
        put("batch_size", &self.batch_size);
        put("epochs", &self.epochs);
        put("thres", &self.thres);
        put("add_nsc_epoch", &self.add_nsc_epoch);
        put("k_frame", &self.k_frame);
        put("k_seg", &self.k_seg);
        put("p", &self.p);
        put("q", &self.q);
        put("seed", &self.seed);
        put("checkpoint_interval", &self.checkpoint_interval);
        put("clip_norm", &self.clip_norm);
        put("phoneme_prominence", &self.phoneme_prominence);
        put("word_prominence", &self.word_prominence);
        put("normalize_word_scores", &self.normalize_word_scores);
        put("resample", &self.resample);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv::KvError;

    #[test]
    fn round_trip() {
        let c = TrainConfig { lr: 0.0025, optimizer: Optimizer::Sgd, thres: 0.07, seed: 42, ..Default::default() };
        assert_eq!(TrainConfig::from_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_listed() {
        match TrainConfig::from_kv("lr = 0.1\nlearning_rate = 2\nfoo = 1\n") {
            Err(Error::Config(KvError::UnknownKeys(k))) => assert_eq!(k, vec!["foo", "learning_rate"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn threshold_range() {
        assert!(matches!(TrainConfig::from_kv("thres = 1.5"), Err(Error::Threshold(_))));
        assert!(TrainConfig::from_kv("thres = 0").is_ok());
    }
}
