//! Plain-text run configuration: UTF-8 `key = value` lines, `#` comments.
//!
//! Every key overrides one default; see [`Config::set`] for the key list.
//! `seed` seeds both the synthetic generator and training.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::RefinerConfig;
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub refiner: RefinerConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    /// Images of the synthetic training split; the validation split follows.
    pub train_images: usize,
    pub val_images: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            refiner: RefinerConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            train_images: 200,
            val_images: 50,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad value `{v}` for `{key}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

impl Config {
    /// Sets one key. Unknown keys are an error.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (r, t, s) = (&mut self.refiner, &mut self.train, &mut self.synth);
        match key {
            "model_dim" => r.model_dim = parse(key, v)?,
            "bottleneck_channels" => r.bottleneck_channels = parse(key, v)?,
            "num_blocks" => r.num_blocks = parse(key, v)?,
            "num_refiners" => r.num_refiners = parse(key, v)?,
            "roi_size" => r.roi_size = parse(key, v)?,
            "share_weights" => r.share_weights = parse_bool(key, v)?,
            "top_k" => r.top_k = parse(key, v)?,
            "clamp_eps" => r.clamp_eps = parse(key, v)?,
            "sampling_ratio" => r.sampling_ratio = parse(key, v)?,
            "norm_groups" => r.norm_groups = parse(key, v)?,

            "epochs" => t.epochs = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "clip_norm" => t.clip_norm = parse(key, v)?,
            "lr_drop_epoch" => t.lr_drop_epoch = parse(key, v)?,
            "lr_drop_factor" => t.lr_drop_factor = parse(key, v)?,
            "loss_l1" => t.loss.w_l1 = parse(key, v)?,
            "loss_giou" => t.loss.w_giou = parse(key, v)?,
            "match_cls" => t.matching.w_cls = parse(key, v)?,
            "match_l1" => t.matching.w_l1 = parse(key, v)?,
            "match_giou" => t.matching.w_giou = parse(key, v)?,

            "image_size" => s.image_size = parse(key, v)?,
            "min_objects" => s.min_objects = parse(key, v)?,
            "max_objects" => s.max_objects = parse(key, v)?,
            "num_categories" => s.num_categories = parse(key, v)?,
            "jitter" => s.jitter = parse(key, v)?,
            "fp_rate" => s.fp_rate = parse(key, v)?,
            "label_noise" => s.label_noise = parse(key, v)?,
            "channels" => s.channels = parse_list(key, v)?,
            "strides" => s.strides = parse_list(key, v)?,
            "snr" => s.snr = parse(key, v)?,
            "min_box" => s.min_box = parse(key, v)?,
            "max_box" => s.max_box = parse(key, v)?,
            "train_images" => self.train_images = parse(key, v)?,
            "val_images" => self.val_images = parse(key, v)?,

            "seed" => self.set_seed(parse(key, v)?),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.synth.seed = seed;
    }

    /// The synthetic generator's config with `num_images` covering both splits.
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            num_images: self.train_images + self.val_images,
            ..self.synth.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.refiner.validate()?;
        self.train.validate()?;
        if self.train_images == 0 {
            return Err(Error::Config("train_images must be positive".into()));
        }
        self.synth_config().validate()
    }
}

/// Parses config text over the defaults; errors carry `origin:line`.
pub fn parse_config(text: &str, origin: &str) -> Result<Config> {
    let mut cfg = Config::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = |e: Error| match e {
            Error::Config(m) => Error::Config(format!("{origin}:{}: {m}", i + 1)),
            e => e,
        };
        let Some((k, v)) = line.split_once('=') else {
            return Err(at(Error::Config(format!(
                "expected `key = value`, got `{line}`"
            ))));
        };
        cfg.set(k.trim(), v.trim()).map_err(at)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<Config> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, &path.display().to_string())
}
