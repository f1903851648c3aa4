//! Flat `key = value` configuration files and the training configuration.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Keys may appear once.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::loss::LossWeights;
use crate::optim::AdamWConfig;
use crate::params::Precision;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: {reason}")]
    Value { key: String, reason: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            reason: "expected `key = value`".into(),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                reason: "empty key".into(),
            });
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                reason: format!("duplicate key `{k}`"),
            });
        }
    }
    Ok(out)
}

pub fn load_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_kv(&text)
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.to_string(),
        reason: e.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Foundation,
    Lora,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Foundation => "foundation",
            Phase::Lora => "lora",
        }
    }
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "foundation" => Ok(Phase::Foundation),
            "lora" => Ok(Phase::Lora),
            other => Err(format!("unknown phase `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub alpha: f64,
    pub beta: f64,
    pub use_vl: bool,
    pub use_tv: bool,
    pub lora_rank: usize,
    pub precision: Precision,
    pub include_untouched: bool,
}

impl TrainConfig {
    pub fn foundation() -> Self {
        Self {
            phase: Phase::Foundation,
            seed: 0,
            steps: 300,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 0.01,
            grad_clip: 1.0,
            alpha: 0.1,
            beta: 0.1,
            use_vl: true,
            use_tv: true,
            lora_rank: 4,
            precision: Precision::Standard,
            include_untouched: true,
        }
    }

    pub fn lora() -> Self {
        Self {
            phase: Phase::Lora,
            steps: 500,
            lr: 1e-3,
            ..Self::foundation()
        }
    }

    pub fn for_phase(phase: Phase) -> Self {
        match phase {
            Phase::Foundation => Self::foundation(),
            Phase::Lora => Self::lora(),
        }
    }

    /// Builds a config from a key-value map; `phase` picks the defaults the
    /// remaining keys override.
    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let phase = match kv.get("phase") {
            Some(p) => value("phase", p)?,
            None => Phase::Foundation,
        };
        let mut cfg = Self::for_phase(phase);
        cfg.apply(kv)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in kv {
            let k = k.as_str();
            match k {
                "phase" => self.phase = value(k, v)?,
                "seed" => self.seed = value(k, v)?,
                "steps" => self.steps = value(k, v)?,
                "batch_size" => self.batch_size = value(k, v)?,
                "lr" => self.lr = value(k, v)?,
                "weight_decay" => self.weight_decay = value(k, v)?,
                "grad_clip" => self.grad_clip = value(k, v)?,
                "alpha" => self.alpha = value(k, v)?,
                "beta" => self.beta = value(k, v)?,
                "use_vl" => self.use_vl = value(k, v)?,
                "use_tv" => self.use_tv = value(k, v)?,
                "lora_rank" => self.lora_rank = value(k, v)?,
                "precision" => self.precision = value(k, v)?,
                "include_untouched" => self.include_untouched = value(k, v)?,
                other => return Err(ConfigError::UnknownKey(other.to_string())),
            }
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(ConfigError::Value {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if self.batch_size < 2 {
            return bad("batch_size", "need at least two samples per batch");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay", "must be non-negative");
        }
        if self.grad_clip <= 0.0 {
            return bad("grad_clip", "must be positive");
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return bad("alpha", "loss weights must be non-negative");
        }
        if self.lora_rank == 0 {
            return bad("lora_rank", "must be positive");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("phase", self.phase.as_str().into());
        put("seed", self.seed.to_string());
        put("steps", self.steps.to_string());
        put("batch_size", self.batch_size.to_string());
        put("lr", format!("{:e}", self.lr));
        put("weight_decay", format!("{:e}", self.weight_decay));
        put("grad_clip", format!("{:e}", self.grad_clip));
        put("alpha", format!("{:e}", self.alpha));
        put("beta", format!("{:e}", self.beta));
        put("use_vl", self.use_vl.to_string());
        put("use_tv", self.use_tv.to_string());
        put("lora_rank", self.lora_rank.to_string());
        put("precision", self.precision.as_str().into());
        put("include_untouched", self.include_untouched.to_string());
        m
    }

    /// Canonical `key = value` text, sorted by key.
    pub fn render(&self) -> String {
        self.to_kv()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 of the canonical rendering.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.render().as_bytes()))
    }

    pub fn loss_weights(&self, log_tau: f64) -> LossWeights {
        LossWeights {
            log_tau,
            alpha: self.alpha,
            beta: self.beta,
            use_vl: self.use_vl,
            use_tv: self.use_tv,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            clip_norm: Some(self.grad_clip),
            ..AdamWConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let kv = parse_kv("# header\n\n steps = 10 \nlr=1e-3\n").unwrap();
        assert_eq!(kv["steps"], "10");
        assert_eq!(kv["lr"], "1e-3");
    }

    #[test]
    fn syntax_errors_carry_line() {
        match parse_kv("a = 1\nnonsense\n").unwrap_err() {
            ConfigError::Syntax { line, .. } => assert_eq!(line, 2),
            e => panic!("{e}"),
        }
        assert!(parse_kv("a = 1\na = 2").is_err());
    }

    #[test]
    fn phase_defaults() {
        let kv = parse_kv("phase = lora").unwrap();
        let c = TrainConfig::from_kv(&kv).unwrap();
        assert_eq!(c.lr, 1e-3);
        let c = TrainConfig::from_kv(&BTreeMap::new()).unwrap();
        assert_eq!(c.phase, Phase::Foundation);
        assert_eq!(c.steps, 300);
    }

    #[test]
    fn rejects_unknown_and_bad_values() {
        assert!(matches!(
            TrainConfig::from_kv(&parse_kv("colour = red").unwrap()),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(TrainConfig::from_kv(&parse_kv("steps = many").unwrap()).is_err());
        assert!(TrainConfig::from_kv(&parse_kv("batch_size = 1").unwrap()).is_err());
        assert!(TrainConfig::from_kv(&parse_kv("precision = f16").unwrap()).is_err());
    }

    #[test]
    fn render_round_trips_and_digest_is_stable() {
        let mut c = TrainConfig::lora();
        c.seed = 11;
        c.alpha = 0.25;
        let back = TrainConfig::from_kv(&parse_kv(&c.render()).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
        c.seed = 12;
        assert_ne!(back.digest(), c.digest());
    }
}
