//! Plain-text run configuration: `key = value` lines, `#` comments.
//!
//! Unknown keys and malformed values are rejected with the offending key
//! named.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::losses::{SmoothingConfig, TripletConfig};
use crate::model::{AdamConfig, LossConfig, ModelConfig};
use crate::pooling::GpConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub image_height: usize,
    pub image_width: usize,
    pub stem_channels: usize,
    pub channels: [usize; 3],
    pub block_depths: [usize; 4],
    /// Convolution within block 2 tapped as the low level; `None` is the
    /// block output.
    pub low_tap: Option<usize>,
    /// Low-rank bilinear pooling dimension `L`.
    pub rank: usize,
    /// Pooling-space dimension `L'`.
    pub pool_dim: usize,
    pub lambdas: Vec<f64>,
    pub use_bfp: bool,
    pub reentry_copies: bool,
    pub batch_norm: bool,
    pub margin: f64,
    pub epsilon: f64,
    pub p: usize,
    pub k: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub train_ids: usize,
    pub test_ids: usize,
    pub per_id: usize,
    pub queries_per_id: usize,
    /// Worker threads; 0 picks automatically, 1 runs sequentially.
    pub threads: usize,
    pub eval_ranks: Vec<usize>,
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_height: 48,
            image_width: 16,
            stem_channels: 8,
            channels: [16, 16, 32],
            block_depths: [1, 1, 1, 1],
            low_tap: None,
            rank: 32,
            pool_dim: 64,
            lambdas: GpConfig::default().lambdas,
            use_bfp: true,
            reentry_copies: false,
            batch_norm: true,
            margin: 0.3,
            epsilon: 0.3,
            p: 8,
            k: 4,
            lr: 2e-4,
            weight_decay: 5e-4,
            epochs: 50,
            train_ids: 16,
            test_ids: 8,
            per_id: 8,
            queries_per_id: 2,
            threads: 0,
            eval_ranks: vec![1, 5, 10],
            dataset: None,
            out: PathBuf::from("out"),
        }
    }
}

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> Error {
    Error::Config(format!("{key} = {value:?}: {why}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| bad(key, value, e))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(|s| parse_num(key, s.trim()))
        .collect()
}

fn parse_array<const N: usize>(key: &str, value: &str) -> Result<[usize; N]> {
    let v: Vec<usize> = parse_list(key, value)?;
    v.try_into()
        .map_err(|v: Vec<usize>| bad(key, value, format!("expected {N} values, got {}", v.len())))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(bad(key, value, "expected true or false")),
    }
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "image_height" => self.image_height = parse_num(key, value)?,
            "image_width" => self.image_width = parse_num(key, value)?,
            "stem_channels" => self.stem_channels = parse_num(key, value)?,
            "channels" => self.channels = parse_array(key, value)?,
            "block_depths" => self.block_depths = parse_array(key, value)?,
            "low_tap" => {
                self.low_tap = match value {
                    "last" => None,
                    v => Some(parse_num(key, v)?),
                }
            }
            "rank" => self.rank = parse_num(key, value)?,
            "pool_dim" => self.pool_dim = parse_num(key, value)?,
            "lambdas" => self.lambdas = parse_list(key, value)?,
            "use_bfp" => self.use_bfp = parse_bool(key, value)?,
            "reentry_copies" => self.reentry_copies = parse_bool(key, value)?,
            "batch_norm" => self.batch_norm = parse_bool(key, value)?,
            "margin" => self.margin = parse_num(key, value)?,
            "epsilon" => self.epsilon = parse_num(key, value)?,
            "p" => self.p = parse_num(key, value)?,
            "k" => self.k = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "train_ids" => self.train_ids = parse_num(key, value)?,
            "test_ids" => self.test_ids = parse_num(key, value)?,
            "per_id" => self.per_id = parse_num(key, value)?,
            "queries_per_id" => self.queries_per_id = parse_num(key, value)?,
            "threads" => self.threads = parse_num(key, value)?,
            "eval_ranks" => self.eval_ranks = parse_list(key, value)?,
            "dataset" => self.dataset = (!value.is_empty()).then(|| PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Checks every field against the invariants of the type it configures.
    pub fn validate(&self) -> Result<()> {
        let wrap = |key: &str, e: Error| Error::Config(format!("{key}: {e}"));
        self.model_config().validate().map_err(|e| wrap("model", e))?;
        self.triplet_config().validate().map_err(|e| wrap("margin/p/k", e))?;
        self.smoothing_config().validate().map_err(|e| wrap("epsilon", e))?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr = {}: must be finite and >= 0", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay = {}: must be finite and >= 0",
                self.weight_decay
            )));
        }
        if self.p > self.train_ids {
            return Err(Error::Config(format!(
                "p = {} exceeds train_ids = {}",
                self.p, self.train_ids
            )));
        }
        if self.k > self.per_id {
            return Err(Error::Config(format!("k = {} exceeds per_id = {}", self.k, self.per_id)));
        }
        if self.per_id < 2 {
            return Err(Error::Config(format!("per_id = {}: must be >= 2", self.per_id)));
        }
        if self.test_ids == 0 {
            return Err(Error::Config("test_ids must be >= 1".into()));
        }
        if self.queries_per_id == 0 || self.queries_per_id >= self.per_id {
            return Err(Error::Config(format!(
                "queries_per_id = {}: must be in 1..per_id",
                self.queries_per_id
            )));
        }
        if self.eval_ranks.is_empty() || self.eval_ranks.contains(&0) {
            return Err(Error::Config("eval_ranks must be positive".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            in_channels: crate::data::CHANNELS,
            image_hw: (self.image_height, self.image_width),
            stem_channels: self.stem_channels,
            channels: self.channels,
            block_depths: self.block_depths,
            low_tap: self.low_tap,
            rank: self.rank,
            pool_dim: self.pool_dim,
            num_classes: self.train_ids,
            pooling: GpConfig {
                lambdas: self.lambdas.clone(),
            },
            use_bfp: self.use_bfp,
            reentry_copies: self.reentry_copies,
            batch_norm: self.batch_norm,
        }
    }

    pub fn triplet_config(&self) -> TripletConfig {
        TripletConfig {
            margin: self.margin,
            p_ids: self.p,
            k_per_id: self.k,
        }
    }

    pub fn smoothing_config(&self) -> SmoothingConfig {
        SmoothingConfig {
            epsilon: self.epsilon,
            num_classes: self.train_ids,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            triplet: self.triplet_config(),
            smoothing_epsilon: self.epsilon,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            train_ids: self.train_ids,
            test_ids: self.test_ids,
            per_id: self.per_id,
            height: self.image_height,
            width: self.image_width,
            queries_per_id: self.queries_per_id,
        }
    }

    /// Optimizer steps per epoch: one pass over the training images.
    pub fn steps_per_epoch(&self) -> usize {
        (self.train_ids * self.per_id).div_ceil(self.p * self.k).max(1)
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch()
    }

    /// Serializes every key; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("image_height", self.image_height.to_string());
        kv("image_width", self.image_width.to_string());
        kv("stem_channels", self.stem_channels.to_string());
        kv("channels", join(&self.channels));
        kv("block_depths", join(&self.block_depths));
        kv("low_tap", self.low_tap.map_or("last".into(), |t| t.to_string()));
        kv("rank", self.rank.to_string());
        kv("pool_dim", self.pool_dim.to_string());
        kv("lambdas", join(&self.lambdas));
        kv("use_bfp", self.use_bfp.to_string());
        kv("reentry_copies", self.reentry_copies.to_string());
        kv("batch_norm", self.batch_norm.to_string());
        kv("margin", self.margin.to_string());
        kv("epsilon", self.epsilon.to_string());
        kv("p", self.p.to_string());
        kv("k", self.k.to_string());
        kv("lr", self.lr.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("epochs", self.epochs.to_string());
        kv("train_ids", self.train_ids.to_string());
        kv("test_ids", self.test_ids.to_string());
        kv("per_id", self.per_id.to_string());
        kv("queries_per_id", self.queries_per_id.to_string());
        kv("threads", self.threads.to_string());
        kv("eval_ranks", join(&self.eval_ranks));
        kv(
            "dataset",
            self.dataset
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        kv("out", self.out.display().to_string());
        s
    }
}
