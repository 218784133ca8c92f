use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::objectives::{AnnealSchedule, LossConfig};
use crate::rnn::ModelConfig;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Malformed { line: usize },
    #[error("line {line}: unknown config key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate config key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("invalid value `{value}` for `{key}`")]
    InvalidValue { key: String, value: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Vae,
    Cvae,
    Mcvae,
    Ae,
    Cae,
    Siamese,
}

impl ModelKind {
    /// Trains on pairs rather than single segments.
    pub fn uses_pairs(self) -> bool {
        matches!(self, ModelKind::Cvae | ModelKind::Mcvae | ModelKind::Cae | ModelKind::Siamese)
    }

    pub fn is_variational(self) -> bool {
        matches!(self, ModelKind::Vae | ModelKind::Cvae | ModelKind::Mcvae)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Vae => "vae",
            ModelKind::Cvae => "cvae",
            ModelKind::Mcvae => "mcvae",
            ModelKind::Ae => "ae",
            ModelKind::Cae => "cae",
            ModelKind::Siamese => "siamese",
        })
    }
}

impl FromStr for ModelKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "vae" => ModelKind::Vae,
            "cvae" => ModelKind::Cvae,
            "mcvae" => ModelKind::Mcvae,
            "ae" => ModelKind::Ae,
            "cae" => ModelKind::Cae,
            "siamese" => ModelKind::Siamese,
            _ => return Err(ConfigError::InvalidValue { key: "kind".into(), value: s.into() }),
        })
    }
}

/// Everything that determines a training run besides its data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Optional cap on optimizer steps, counted across resumes.
    pub max_steps: Option<u64>,
    /// Steps between validation evaluations; `None` evaluates after every
    /// epoch.
    pub eval_every: Option<u64>,
    /// Stop after this many evaluations without a new best.
    pub patience: Option<usize>,
    pub seed: u64,
    pub loss: LossConfig,
    pub anneal: AnnealSchedule,
    /// Multiply the KL weight by the annealing schedule.
    pub kl_anneal: bool,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Checkpoint to start from.
    pub init: Option<PathBuf>,
}

impl TrainConfig {
    /// Defaults for `kind`: the VAE anneals its KL weight up to 1, the
    /// CVAE anneals up to 0.001, the MCVAE uses a fixed 0.001.
    pub fn new(kind: ModelKind) -> Self {
        let loss = LossConfig { kl_weight: if kind == ModelKind::Vae { 1.0 } else { 0.001 }, ..LossConfig::default() };
        Self {
            kind,
            model: ModelConfig::default(),
            learning_rate: 0.001,
            batch_size: 100,
            max_epochs: 40,
            max_steps: None,
            eval_every: None,
            patience: None,
            seed: 0,
            loss,
            anneal: AnnealSchedule::default(),
            kl_anneal: matches!(kind, ModelKind::Vae | ModelKind::Cvae),
            clip_norm: Some(5.0),
            init: None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.model.validate().map_err(ConfigError::Invalid)?;
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be non-negative, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.eval_every == Some(0) {
            return bad("eval_every must be positive".into());
        }
        let l = &self.loss;
        if !(l.sigma2 > 0.0) || !(l.kl_weight >= 0.0) || l.samples == 0 || !(l.margin >= 0.0) {
            return bad(format!("invalid loss settings {l:?}"));
        }
        if !(self.anneal.slope > 0.0) || !(self.anneal.midpoint >= 0.0) {
            return bad(format!("invalid annealing schedule {:?}", self.anneal));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip_norm must be positive or none".into());
        }
        Ok(())
    }

    /// Flat key/value view, as written to config files and checkpoints.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("kind", self.kind.to_string());
        put("feature_dim", self.model.feature_dim.to_string());
        put("hidden_dim", self.model.hidden_dim.to_string());
        put("latent_dim", self.model.latent_dim.to_string());
        put("layers", self.model.layers.to_string());
        put("decoder_bidirectional", self.model.decoder_bidirectional.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put("batch_size", self.batch_size.to_string());
        put("max_epochs", self.max_epochs.to_string());
        put("max_steps", opt(self.max_steps.map(|v| v.to_string())));
        put("eval_every", opt(self.eval_every.map(|v| v.to_string())));
        put("patience", opt(self.patience.map(|v| v.to_string())));
        put("seed", self.seed.to_string());
        put("sigma2", self.loss.sigma2.to_string());
        put("kl_weight", self.loss.kl_weight.to_string());
        put("samples", self.loss.samples.to_string());
        put("margin", self.loss.margin.to_string());
        put("anneal_slope", self.anneal.slope.to_string());
        put("anneal_midpoint", self.anneal.midpoint.to_string());
        put("kl_anneal", self.kl_anneal.to_string());
        put("clip_norm", opt(self.clip_norm.map(|v| v.to_string())));
        put("init", opt(self.init.as_ref().map(|p| p.display().to_string())));
        m
    }

    pub fn to_text(&self) -> String {
        self.to_map().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Parses `key = value` lines (`#` starts a comment). Unset keys take
    /// the defaults of the configured `kind` (`vae` if absent).
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries: Vec<(usize, String, String)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Malformed { line: n + 1 })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(ConfigError::Malformed { line: n + 1 });
            }
            if entries.iter().any(|(_, key, _)| key == k) {
                return Err(ConfigError::DuplicateKey { line: n + 1, key: k.into() });
            }
            entries.push((n + 1, k.to_string(), v.to_string()));
        }
        let kind = match entries.iter().find(|(_, k, _)| k == "kind") {
            Some((_, _, v)) => v.parse()?,
            None => ModelKind::Vae,
        };
        let mut c = Self::new(kind);
        for (line, k, v) in &entries {
            c.set(k, v).map_err(|e| match e {
                ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { line: *line, key },
                other => other,
            })?;
        }
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::InvalidValue { key: key.into(), value: value.into() })
        }
        fn opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, ConfigError> {
            if value == "none" {
                Ok(None)
            } else {
                num(key, value).map(Some)
            }
        }
        match key {
            "kind" => self.kind = value.parse()?,
            "feature_dim" => self.model.feature_dim = num(key, value)?,
            "hidden_dim" => self.model.hidden_dim = num(key, value)?,
            "latent_dim" => self.model.latent_dim = num(key, value)?,
            "layers" => self.model.layers = num(key, value)?,
            "decoder_bidirectional" => self.model.decoder_bidirectional = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "max_steps" => self.max_steps = opt(key, value)?,
            "eval_every" => self.eval_every = opt(key, value)?,
            "patience" => self.patience = opt(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "sigma2" => self.loss.sigma2 = num(key, value)?,
            "kl_weight" => self.loss.kl_weight = num(key, value)?,
            "samples" => self.loss.samples = num(key, value)?,
            "margin" => self.loss.margin = num(key, value)?,
            "anneal_slope" => self.anneal.slope = num(key, value)?,
            "anneal_midpoint" => self.anneal.midpoint = num(key, value)?,
            "kl_anneal" => self.kl_anneal = num(key, value)?,
            "clip_norm" => self.clip_norm = opt(key, value)?,
            "init" => self.init = opt::<String>(key, value)?.map(PathBuf::from),
            _ => return Err(ConfigError::UnknownKey { line: 0, key: key.into() }),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::new(ModelKind::Mcvae);
        c.max_steps = Some(17);
        c.init = Some(PathBuf::from("runs/pre/best.ckpt"));
        c.loss.samples = 3;
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn kind_defaults() {
        let vae = TrainConfig::parse("kind = vae").unwrap();
        assert_eq!((vae.loss.kl_weight, vae.kl_anneal), (1.0, true));
        let cvae = TrainConfig::parse("kind = cvae").unwrap();
        assert_eq!((cvae.loss.kl_weight, cvae.kl_anneal), (0.001, true));
        let mcvae = TrainConfig::parse("kind = mcvae\n# comment\n\nseed = 3 # trailing").unwrap();
        assert_eq!((mcvae.loss.kl_weight, mcvae.kl_anneal, mcvae.seed), (0.001, false, 3));
    }

    #[test]
    fn rejects_unknown_and_bad_values() {
        assert_eq!(
            TrainConfig::parse("seed = 1\nlerning_rate = 0.1").unwrap_err(),
            ConfigError::UnknownKey { line: 2, key: "lerning_rate".into() }
        );
        assert!(matches!(TrainConfig::parse("batch_size = many"), Err(ConfigError::InvalidValue { .. })));
        assert!(matches!(TrainConfig::parse("batch_size = 0"), Err(ConfigError::Invalid(_))));
        assert!(matches!(TrainConfig::parse("seed"), Err(ConfigError::Malformed { line: 1 })));
        assert!(matches!(TrainConfig::parse("seed = 1\nseed = 2"), Err(ConfigError::DuplicateKey { .. })));
    }
}
