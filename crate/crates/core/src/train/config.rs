//! Run configuration and its flat `key = value` text form.
//!
//! One key per line, `#` starts a comment, blank lines are ignored. Every
//! key is optional and falls back to [`TrainConfig::default`]; unknown and
//! repeated keys are errors. [`TrainConfig::to_text`] writes every key, so
//! its output parses back to an equal config.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::blocks::BlockVariant;
use crate::error::{Error, Result};
use crate::objective::LossConfig;
use crate::train::synth::Degradation;
use crate::unet::CuMambaConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: CuMambaConfig,
    pub loss: LossConfig,
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub augment_flip: bool,
    pub augment_rotate: bool,
    pub degradation: Degradation,
    /// Held-out pairs scored by `evaluate`.
    pub test_pairs: usize,
    /// CSV log interval in steps; 0 disables logging.
    pub log_every: u64,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Worker threads; 0 lets the library choose.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: CuMambaConfig::desk(),
            loss: LossConfig::default(),
            seed: 0,
            steps: 5000,
            batch_size: 4,
            lr_start: 5e-5,
            lr_end: 1e-6,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            clip_norm: None,
            augment_flip: true,
            augment_rotate: true,
            degradation: Degradation::Gaussian { sigma_255: 25.0 },
            test_pairs: 16,
            log_every: 100,
            checkpoint_every: 0,
            threads: 1,
        }
    }
}

/// Feeds every `key = value` line of `text` to `apply`, skipping blank
/// lines and `#` comments. Malformed lines and repeated keys are errors, and
/// every error names its line.
pub fn parse_assignments(text: &str, mut apply: impl FnMut(&str, &str) -> Result<()>) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
        let key = key.trim();
        if !seen.insert(key.to_string()) {
            return Err(Error::Config(format!("line {}: `{key}` set twice", n + 1)));
        }
        apply(key, value.trim())
            .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config: "))))?;
    }
    Ok(())
}

pub(crate) fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.degradation.validate()?;
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr_start > 0.0 && self.lr_end >= 0.0 && self.lr_end <= self.lr_start) {
            return bad("learning rates need lr_start > 0 and 0 <= lr_end <= lr_start");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.adam_epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("adam_epsilon must be > 0 and weight_decay >= 0");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip_norm must be > 0 (or 0 to disable)");
        }
        if self.augment_rotate && self.model.patch.0 != self.model.patch.1 {
            return bad("augment_rotate needs square patches");
        }
        Ok(())
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "levels" => m.levels = parse(key, value)?,
            "blocks_per_level" => {
                m.blocks_per_level = value
                    .split(',')
                    .map(|v| parse(key, v.trim()))
                    .collect::<Result<_>>()?
            }
            "base_width" => m.base_width = parse(key, value)?,
            "state_size" => m.state_size = parse(key, value)?,
            "expansion" => m.expansion = parse(key, value)?,
            "patch_height" => m.patch.0 = parse(key, value)?,
            "patch_width" => m.patch.1 = parse(key, value)?,
            "spatial_ssm" => m.variant.spatial = parse_bool(key, value)?,
            "channel_ssm" => m.variant.channel = parse_bool(key, value)?,
            "loss_epsilon" => self.loss.epsilon = parse(key, value)?,
            "loss_lambda" => self.loss.lambda = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr_start" => self.lr_start = parse(key, value)?,
            "lr_end" => self.lr_end = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_epsilon" => self.adam_epsilon = parse(key, value)?,
            "clip_norm" => {
                let c: f64 = parse(key, value)?;
                self.clip_norm = (c != 0.0).then_some(c);
            }
            "augment_flip" => self.augment_flip = parse_bool(key, value)?,
            "augment_rotate" => self.augment_rotate = parse_bool(key, value)?,
            "degradation" => self.degradation = value.parse()?,
            "test_pairs" => self.test_pairs = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses the flat text form on top of the defaults and validates.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        parse_assignments(text, |key, value| cfg.set(key, value))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("levels", m.levels.to_string());
        put(
            "blocks_per_level",
            m.blocks_per_level.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(","),
        );
        put("base_width", m.base_width.to_string());
        put("state_size", m.state_size.to_string());
        put("expansion", m.expansion.to_string());
        put("patch_height", m.patch.0.to_string());
        put("patch_width", m.patch.1.to_string());
        put("spatial_ssm", m.variant.spatial.to_string());
        put("channel_ssm", m.variant.channel.to_string());
        put("loss_epsilon", self.loss.epsilon.to_string());
        put("loss_lambda", self.loss.lambda.to_string());
        put("seed", self.seed.to_string());
        put("steps", self.steps.to_string());
        put("batch_size", self.batch_size.to_string());
        put("lr_start", self.lr_start.to_string());
        put("lr_end", self.lr_end.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("beta1", self.beta1.to_string());
        put("beta2", self.beta2.to_string());
        put("adam_epsilon", self.adam_epsilon.to_string());
        put("clip_norm", self.clip_norm.unwrap_or(0.0).to_string());
        put("augment_flip", self.augment_flip.to_string());
        put("augment_rotate", self.augment_rotate.to_string());
        put("degradation", self.degradation.to_string());
        put("test_pairs", self.test_pairs.to_string());
        put("log_every", self.log_every.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("threads", self.threads.to_string());
        out
    }

    /// The model variant with both SSM paths set as given.
    pub fn with_variant(mut self, variant: BlockVariant) -> Self {
        self.model.variant = variant;
        self
    }
}
