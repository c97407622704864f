//! `key = value` run configuration files.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors.
//! Optional numbers accept `none`.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub const KEYS: &[&str] = &[
    "backend",
    "pretrained_dir",
    "max_length",
    "hidden_size",
    "label_hidden_size",
    "latent_size",
    "layers",
    "heads",
    "ffn_size",
    "activation",
    "pooling",
    "lop",
    "loss",
    "focal_gamma",
    "focal_alpha",
    "loss_reduction",
    "threshold",
    "init_seed",
    "steps",
    "batch_size",
    "lr_encoder",
    "lr_heads",
    "seed",
    "eval_every",
    "mode",
    "weight_decay",
    "warmup_ratio",
    "max_grad_norm",
    "pair_cap",
    "negative_labels",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    if value.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

/// `true`/`false`, also accepting `on`/`off`.
fn parse_switch(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "on" => Ok(true),
        "off" => Ok(false),
        _ => parse(key, value),
    }
}

fn show_opt<T: Display>(v: &Option<T>) -> String {
    v.as_ref()
        .map_or_else(|| "none".to_string(), ToString::to_string)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let e = &mut m.encoder;
        let t = &mut self.train;
        match key {
            "backend" => e.backend_kind = parse(key, value)?,
            "pretrained_dir" => {
                e.pretrained_dir =
                    (!value.eq_ignore_ascii_case("none")).then(|| PathBuf::from(value))
            }
            "max_length" => e.max_length = parse(key, value)?,
            "hidden_size" => e.hidden_size = parse(key, value)?,
            "label_hidden_size" => e.label_hidden_size = parse(key, value)?,
            "latent_size" => e.latent_size = parse(key, value)?,
            "layers" => e.layers = parse(key, value)?,
            "heads" => e.heads = parse(key, value)?,
            "ffn_size" => e.ffn_size = parse(key, value)?,
            "activation" => e.activation = parse(key, value)?,
            "pooling" => m.pooling = parse(key, value)?,
            "lop" => m.lop = parse_switch(key, value)?,
            "loss" => m.loss = parse(key, value)?,
            "focal_gamma" => m.focal.gamma = parse(key, value)?,
            "focal_alpha" => m.focal.alpha_pos = parse(key, value)?,
            "loss_reduction" => m.loss_reduction = parse(key, value)?,
            "threshold" => m.threshold = parse(key, value)?,
            "init_seed" => m.seed = parse(key, value)?,
            "steps" => t.steps = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr_encoder" => t.lr_encoder = parse(key, value)?,
            "lr_heads" => t.lr_heads = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "eval_every" => t.eval_every = parse(key, value)?,
            "mode" => t.mode = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "warmup_ratio" => t.warmup_ratio = parse(key, value)?,
            "max_grad_norm" => t.max_grad_norm = parse_opt(key, value)?,
            "pair_cap" => t.pair_cap = parse_opt(key, value)?,
            "negative_labels" => t.negative_labels = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let m = &self.model;
        let e = &m.encoder;
        let t = &self.train;
        Ok(match key {
            "backend" => e.backend_kind.to_string(),
            "pretrained_dir" => e
                .pretrained_dir
                .as_ref()
                .map_or_else(|| "none".into(), |p| p.display().to_string()),
            "max_length" => e.max_length.to_string(),
            "hidden_size" => e.hidden_size.to_string(),
            "label_hidden_size" => e.label_hidden_size.to_string(),
            "latent_size" => e.latent_size.to_string(),
            "layers" => e.layers.to_string(),
            "heads" => e.heads.to_string(),
            "ffn_size" => e.ffn_size.to_string(),
            "activation" => e.activation.to_string(),
            "pooling" => m.pooling.to_string(),
            "lop" => m.lop.to_string(),
            "loss" => m.loss.to_string(),
            "focal_gamma" => m.focal.gamma.to_string(),
            "focal_alpha" => m.focal.alpha_pos.to_string(),
            "loss_reduction" => m.loss_reduction.to_string(),
            "threshold" => m.threshold.to_string(),
            "init_seed" => m.seed.to_string(),
            "steps" => t.steps.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "lr_encoder" => t.lr_encoder.to_string(),
            "lr_heads" => t.lr_heads.to_string(),
            "seed" => t.seed.to_string(),
            "eval_every" => t.eval_every.to_string(),
            "mode" => t.mode.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "warmup_ratio" => t.warmup_ratio.to_string(),
            "max_grad_norm" => show_opt(&t.max_grad_norm),
            "pair_cap" => show_opt(&t.pair_cap),
            "negative_labels" => t.negative_labels.to_string(),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        })
    }

    /// Apply every assignment in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got `{}`",
                    n + 1,
                    raw.trim()
                ))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn render(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }
}
