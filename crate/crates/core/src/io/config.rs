//! Flat `key = value` run configuration.
//!
//! Lines are `section.key = value`; `#` starts a comment. Every key has a
//! default and unknown keys are rejected. Environment variables named
//! `RSALIGN_<KEY>` (key upper-cased, dots replaced by underscores) override
//! file values, e.g. `RSALIGN_ALIGN_DELTA=0.25`.

use std::fmt::Display;
use std::str::FromStr;

use serde::Serialize;

use crate::align::AlignWeights;
use crate::dris::DrisConfig;
use crate::error::{Error, Result};
use crate::toyvlm::{ToyModelConfig, TrainConfig};

pub const ENV_PREFIX: &str = "RSALIGN_";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub dris: DrisConfig,
    pub align: AlignWeights,
    /// Dimension of hashed text embeddings; must equal grid channels.
    pub text_dim: usize,
    pub model: ToyModelConfig,
    pub train: TrainConfig,
    /// Synthetic pairs generated for `train` when no dataset is given.
    pub pairs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dris: DrisConfig::default(),
            align: AlignWeights::default(),
            text_dim: 16,
            model: ToyModelConfig::toy(),
            train: TrainConfig::default(),
            pairs: 32,
        }
    }
}

pub const KEYS: [&str; 28] = [
    "dris.tau_saliency",
    "dris.sigma",
    "dris.k",
    "dris.n",
    "dris.roi_height",
    "dris.roi_width",
    "align.alpha",
    "align.beta",
    "align.gamma",
    "align.mu",
    "align.tau_temp",
    "align.delta",
    "align.text_dim",
    "model.image_size",
    "model.patch_size",
    "model.channels",
    "model.embed_dim",
    "model.heads",
    "model.vocab",
    "model.max_text_len",
    "train.batch_size",
    "train.peak_lr",
    "train.warmup_steps",
    "train.total_steps",
    "train.steps",
    "train.weight_decay",
    "train.seed",
    "train.pairs",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::InvalidArgument(format!("{key}: cannot parse {value:?}: {e}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "dris.tau_saliency" => self.dris.tau_saliency = parse(key, v)?,
            "dris.sigma" => self.dris.sigma = parse(key, v)?,
            "dris.k" => self.dris.k = parse(key, v)?,
            "dris.n" => self.dris.n = parse(key, v)?,
            "dris.roi_height" => self.dris.roi_size.0 = parse(key, v)?,
            "dris.roi_width" => self.dris.roi_size.1 = parse(key, v)?,
            "align.alpha" => self.align.alpha = parse(key, v)?,
            "align.beta" => self.align.beta = parse(key, v)?,
            "align.gamma" => self.align.gamma = parse(key, v)?,
            "align.mu" => self.align.mu = parse(key, v)?,
            "align.tau_temp" => self.align.tau_temp = parse(key, v)?,
            "align.delta" => self.align.delta = parse(key, v)?,
            "align.text_dim" => self.text_dim = parse(key, v)?,
            "model.image_size" => self.model.image_size = parse(key, v)?,
            "model.patch_size" => self.model.patch_size = parse(key, v)?,
            "model.channels" => self.model.channels = parse(key, v)?,
            "model.embed_dim" => self.model.embed_dim = parse(key, v)?,
            "model.heads" => self.model.heads = parse(key, v)?,
            "model.vocab" => self.model.vocab = parse(key, v)?,
            "model.max_text_len" => self.model.max_text_len = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.peak_lr" => self.train.peak_lr = parse(key, v)?,
            "train.warmup_steps" => self.train.warmup_steps = parse(key, v)?,
            "train.total_steps" => self.train.total_steps = parse(key, v)?,
            "train.steps" => self.train.steps = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.pairs" => self.pairs = parse(key, v)?,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown config key {key:?}"
                )))
            }
        }
        Ok(())
    }

    /// Current value of `key` as text.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "dris.tau_saliency" => self.dris.tau_saliency.to_string(),
            "dris.sigma" => self.dris.sigma.to_string(),
            "dris.k" => self.dris.k.to_string(),
            "dris.n" => self.dris.n.to_string(),
            "dris.roi_height" => self.dris.roi_size.0.to_string(),
            "dris.roi_width" => self.dris.roi_size.1.to_string(),
            "align.alpha" => self.align.alpha.to_string(),
            "align.beta" => self.align.beta.to_string(),
            "align.gamma" => self.align.gamma.to_string(),
            "align.mu" => self.align.mu.to_string(),
            "align.tau_temp" => self.align.tau_temp.to_string(),
            "align.delta" => self.align.delta.to_string(),
            "align.text_dim" => self.text_dim.to_string(),
            "model.image_size" => self.model.image_size.to_string(),
            "model.patch_size" => self.model.patch_size.to_string(),
            "model.channels" => self.model.channels.to_string(),
            "model.embed_dim" => self.model.embed_dim.to_string(),
            "model.heads" => self.model.heads.to_string(),
            "model.vocab" => self.model.vocab.to_string(),
            "model.max_text_len" => self.model.max_text_len.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.peak_lr" => self.train.peak_lr.to_string(),
            "train.warmup_steps" => self.train.warmup_steps.to_string(),
            "train.total_steps" => self.train.total_steps.to_string(),
            "train.steps" => self.train.steps.to_string(),
            "train.weight_decay" => self.train.weight_decay.to_string(),
            "train.seed" => self.train.seed.to_string(),
            "train.pairs" => self.pairs.to_string(),
            _ => return None,
        })
    }

    /// Every key with its current value, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        KEYS.iter()
            .map(|&k| (k, self.get(k).unwrap_or_default()))
            .collect()
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |detail: String| Error::Parse {
                line: i + 1,
                detail,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected key = value, got {line:?}")))?;
            self.set(k.trim(), v)
                .map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn env_name(key: &str) -> String {
        format!("{ENV_PREFIX}{}", key.to_uppercase().replace('.', "_"))
    }

    /// Applies overrides from `vars`. Variables carrying the prefix but
    /// naming no known key are rejected.
    pub fn apply_env<I>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        for (name, value) in vars {
            if !name.starts_with(ENV_PREFIX) {
                continue;
            }
            let key = KEYS
                .iter()
                .find(|k| Self::env_name(k) == name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown override {name}")))?;
            self.set(key, &value)
                .map_err(|e| Error::InvalidArgument(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.dris.validate()?;
        self.align.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.text_dim == 0 {
            return Err(Error::InvalidArgument(
                "align.text_dim must be positive".into(),
            ));
        }
        if self.pairs == 0 {
            return Err(Error::InvalidArgument(
                "train.pairs must be positive".into(),
            ));
        }
        Ok(())
    }
}
