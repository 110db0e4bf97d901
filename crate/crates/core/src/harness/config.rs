//! Training configuration and its flat `key=value` text form.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::encoders::EncoderDims;
use crate::error::{Error, Result};
use crate::jsa::SlotConfig;
use crate::objectives::{LossWeights, DECODER_HIDDEN};
use crate::synthbench::{AUDIO_FREQ, AUDIO_TIME, IMAGE_SIZE};

/// Every knob of a training run. Keys of the text form are the field names.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub alpha: f64,
    pub k: usize,
    pub iters: usize,
    pub mask_ratio: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub steps: u64,
    pub seed: u64,
    pub h: usize,
    pub w: usize,
    pub t: usize,
    pub c: usize,
    pub d: usize,
    pub hidden: usize,
    pub decoder_hidden: usize,
    pub n_target: usize,
    pub n_off: usize,
    pub checkpoint_every: u64,
    pub dataset: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 0.03,
            lambda1: 100.0,
            lambda2: 0.1,
            lambda3: 0.1,
            alpha: 0.6,
            k: 2,
            iters: 5,
            mask_ratio: 0.1,
            lr: 1e-3,
            weight_decay: 1e-2,
            batch: 16,
            steps: 2000,
            seed: 0,
            h: 7,
            w: 7,
            t: 16,
            c: 32,
            d: 32,
            hidden: 32,
            decoder_hidden: DECODER_HIDDEN,
            n_target: 1,
            n_off: 1,
            checkpoint_every: 500,
            dataset: PathBuf::from("data/train"),
        }
    }
}

/// Keys accepted by [`TrainConfig::set`], in canonical order.
pub const KEYS: &[&str] = &[
    "tau",
    "lambda1",
    "lambda2",
    "lambda3",
    "alpha",
    "k",
    "iters",
    "mask_ratio",
    "lr",
    "weight_decay",
    "batch",
    "steps",
    "seed",
    "h",
    "w",
    "t",
    "c",
    "d",
    "hidden",
    "decoder_hidden",
    "n_target",
    "n_off",
    "checkpoint_every",
    "dataset",
];

/// Keys that change the parameter layout; a checkpoint only loads into a
/// model that agrees on all of them.
pub const ARCHITECTURE_KEYS: &[&str] = &["h", "w", "t", "c", "d", "hidden", "decoder_hidden", "n_target", "n_off", "iters"];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl TrainConfig {
    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "tau" => self.tau = parse(key, value)?,
            "lambda1" => self.lambda1 = parse(key, value)?,
            "lambda2" => self.lambda2 = parse(key, value)?,
            "lambda3" => self.lambda3 = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "iters" => self.iters = parse(key, value)?,
            "mask_ratio" => self.mask_ratio = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "h" => self.h = parse(key, value)?,
            "w" => self.w = parse(key, value)?,
            "t" => self.t = parse(key, value)?,
            "c" => self.c = parse(key, value)?,
            "d" => self.d = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "decoder_hidden" => self.decoder_hidden = parse(key, value)?,
            "n_target" => self.n_target = parse(key, value)?,
            "n_off" => self.n_off = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "dataset" => self.dataset = PathBuf::from(value.trim()),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Text form of one field, round-tripping exactly through [`set`](Self::set).
    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "tau" => self.tau.to_string(),
            "lambda1" => self.lambda1.to_string(),
            "lambda2" => self.lambda2.to_string(),
            "lambda3" => self.lambda3.to_string(),
            "alpha" => self.alpha.to_string(),
            "k" => self.k.to_string(),
            "iters" => self.iters.to_string(),
            "mask_ratio" => self.mask_ratio.to_string(),
            "lr" => self.lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "batch" => self.batch.to_string(),
            "steps" => self.steps.to_string(),
            "seed" => self.seed.to_string(),
            "h" => self.h.to_string(),
            "w" => self.w.to_string(),
            "t" => self.t.to_string(),
            "c" => self.c.to_string(),
            "d" => self.d.to_string(),
            "hidden" => self.hidden.to_string(),
            "decoder_hidden" => self.decoder_hidden.to_string(),
            "n_target" => self.n_target.to_string(),
            "n_off" => self.n_off.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "dataset" => self.dataset.display().to_string(),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        })
    }

    /// Parses `key = value` lines; blank lines and `#` comments are ignored.
    /// Keys not present keep their defaults. The result is validated.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", n + 1)))?;
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        Self::parse_text(&std::fs::read_to_string(path)?)
    }

    /// Canonical text form with a desk-scale header comment.
    pub fn to_text(&self) -> String {
        let mut out = String::from(
            "# desk-scale run: batch, channel width c and slot width d are reduced from the reference setting (256, 512, 512)\n",
        );
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("canonical key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau", self.tau), ("lr", self.lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative and finite, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha = {} outside [0, 1]", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio = {} outside [0, 1)", self.mask_ratio)));
        }
        for (name, v) in [
            ("k", self.k),
            ("iters", self.iters),
            ("hidden", self.hidden),
            ("decoder_hidden", self.decoder_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.batch < 2 {
            return Err(Error::Config("batch must be at least 2".into()));
        }
        if self.h != self.w {
            return Err(Error::Config(format!("image grid must be square, got {}x{}", self.h, self.w)));
        }
        self.encoder_dims().validate()?;
        self.slot_config().validate()?;
        Ok(())
    }

    pub fn encoder_dims(&self) -> EncoderDims {
        EncoderDims {
            image_size: IMAGE_SIZE,
            image_channels: 1,
            image_patch: IMAGE_SIZE.checked_div(self.h).unwrap_or(0),
            audio_freq: AUDIO_FREQ,
            audio_time: AUDIO_TIME,
            freq_patch: 8,
            time_patch: AUDIO_TIME.checked_div(self.t).unwrap_or(0),
            hidden: self.hidden,
            channels: self.c,
        }
    }

    pub fn slot_config(&self) -> SlotConfig {
        SlotConfig {
            n_target: self.n_target,
            n_off: self.n_off,
            d: self.d,
            iters: self.iters,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            match_weight: self.lambda1,
            div_weight: self.lambda2,
            recon_weight: self.lambda3,
            tau: self.tau,
        }
    }

    /// Architecture keys on which `self` and `other` disagree.
    pub fn architecture_mismatch(&self, other: &TrainConfig) -> Vec<String> {
        ARCHITECTURE_KEYS
            .iter()
            .filter(|k| self.get(k).ok() != other.get(k).ok())
            .map(|k| format!("{k}: {} vs {}", self.get(k).unwrap_or_default(), other.get(k).unwrap_or_default()))
            .collect()
    }
}
