//! Flat `key = value` run configuration.
//!
//! One file covers model dimensions, module switches, training and
//! evaluation. `#` starts a comment; blank lines are ignored; unknown keys
//! are rejected. The canonical form lists every key in sorted order, and
//! the fingerprint is a hash of that text, so echoing a configuration and
//! reading it back reproduces the fingerprint.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{ClassifierConfig, EvalConfig};
use crate::model::{ModelDims, Toggles};
use crate::reconstruction::Activation;
use crate::training::{ConsReduction, LossConfig, TrainConfig};

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().fold(String::with_capacity(16), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dims: ModelDims,
    pub toggles: Toggles,
    pub alpha: f64,
    pub beta: f64,
    pub cons_reduction: ConsReduction,
    pub train_n_way: usize,
    pub train_k_shot: usize,
    pub train_queries: usize,
    pub train_episodes: usize,
    pub train_generate: usize,
    pub train_lr: f32,
    pub eval_n_way: usize,
    pub eval_k_shot: usize,
    pub eval_queries: usize,
    pub eval_episodes: usize,
    pub eval_generate: usize,
    pub classifier: ClassifierConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let eval = EvalConfig::default();
        Self {
            seed: 0,
            dims: ModelDims::default_dims(),
            toggles: Toggles::ALL,
            alpha: train.loss.alpha,
            beta: train.loss.beta,
            cons_reduction: train.loss.cons_reduction,
            train_n_way: train.n_way,
            train_k_shot: train.k_shot,
            train_queries: train.queries,
            train_episodes: train.episodes,
            train_generate: train.loss.n_generate,
            train_lr: train.lr,
            eval_n_way: eval.n_way,
            eval_k_shot: eval.k_shot,
            eval_queries: eval.queries,
            eval_episodes: eval.episodes,
            eval_generate: eval.n_generate,
            classifier: eval.classifier,
        }
    }
}

/// Every accepted key, sorted.
pub const KEYS: &[&str] = &[
    "activation",
    "alpha",
    "beta",
    "clf.l2",
    "clf.lr",
    "clf.steps",
    "cons_reduction",
    "d_ff",
    "dim",
    "eval.episodes",
    "eval.generate",
    "eval.k_shot",
    "eval.n_way",
    "eval.queries",
    "heads",
    "ifm",
    "latent",
    "positional",
    "seed",
    "sfm",
    "tokens",
    "train.episodes",
    "train.generate",
    "train.k_shot",
    "train.lr",
    "train.n_way",
    "train.queries",
    "vae_depth",
    "vae_hidden",
    "vsgm",
];

fn parse_num<N: std::str::FromStr>(key: &str, value: &str) -> Result<N>
where
    N::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(format!("{key} = {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::config(format!("{key} = {value:?}: expected true or false"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "activation" => self.dims.activation = Activation::parse(v)?,
            "alpha" => self.alpha = parse_num(key, v)?,
            "beta" => self.beta = parse_num(key, v)?,
            "clf.l2" => self.classifier.l2 = parse_num(key, v)?,
            "clf.lr" => self.classifier.lr = parse_num(key, v)?,
            "clf.steps" => self.classifier.steps = parse_num(key, v)?,
            "cons_reduction" => self.cons_reduction = ConsReduction::parse(v)?,
            "d_ff" => self.dims.d_ff = parse_num(key, v)?,
            "dim" => self.dims.dim = parse_num(key, v)?,
            "eval.episodes" => self.eval_episodes = parse_num(key, v)?,
            "eval.generate" => self.eval_generate = parse_num(key, v)?,
            "eval.k_shot" => self.eval_k_shot = parse_num(key, v)?,
            "eval.n_way" => self.eval_n_way = parse_num(key, v)?,
            "eval.queries" => self.eval_queries = parse_num(key, v)?,
            "heads" => self.dims.heads = parse_num(key, v)?,
            "ifm" => self.toggles.ifm = parse_bool(key, v)?,
            "latent" => self.dims.latent = parse_num(key, v)?,
            "positional" => self.dims.positional = parse_bool(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "sfm" => self.toggles.sfm = parse_bool(key, v)?,
            "tokens" => self.dims.tokens = parse_num(key, v)?,
            "train.episodes" => self.train_episodes = parse_num(key, v)?,
            "train.generate" => self.train_generate = parse_num(key, v)?,
            "train.k_shot" => self.train_k_shot = parse_num(key, v)?,
            "train.lr" => self.train_lr = parse_num(key, v)?,
            "train.n_way" => self.train_n_way = parse_num(key, v)?,
            "train.queries" => self.train_queries = parse_num(key, v)?,
            "vae_depth" => self.dims.vae_depth = parse_num(key, v)?,
            "vae_hidden" => self.dims.vae_hidden = parse_num(key, v)?,
            "vsgm" => self.toggles.vsgm = parse_bool(key, v)?,
            _ => return Err(Error::config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "activation" => self.dims.activation.name().to_string(),
            "alpha" => self.alpha.to_string(),
            "beta" => self.beta.to_string(),
            "clf.l2" => self.classifier.l2.to_string(),
            "clf.lr" => self.classifier.lr.to_string(),
            "clf.steps" => self.classifier.steps.to_string(),
            "cons_reduction" => self.cons_reduction.name().to_string(),
            "d_ff" => self.dims.d_ff.to_string(),
            "dim" => self.dims.dim.to_string(),
            "eval.episodes" => self.eval_episodes.to_string(),
            "eval.generate" => self.eval_generate.to_string(),
            "eval.k_shot" => self.eval_k_shot.to_string(),
            "eval.n_way" => self.eval_n_way.to_string(),
            "eval.queries" => self.eval_queries.to_string(),
            "heads" => self.dims.heads.to_string(),
            "ifm" => self.toggles.ifm.to_string(),
            "latent" => self.dims.latent.to_string(),
            "positional" => self.dims.positional.to_string(),
            "seed" => self.seed.to_string(),
            "sfm" => self.toggles.sfm.to_string(),
            "tokens" => self.dims.tokens.to_string(),
            "train.episodes" => self.train_episodes.to_string(),
            "train.generate" => self.train_generate.to_string(),
            "train.k_shot" => self.train_k_shot.to_string(),
            "train.lr" => self.train_lr.to_string(),
            "train.n_way" => self.train_n_way.to_string(),
            "train.queries" => self.train_queries.to_string(),
            "vae_depth" => self.dims.vae_depth.to_string(),
            "vae_hidden" => self.dims.vae_hidden.to_string(),
            "vsgm" => self.toggles.vsgm.to_string(),
            _ => return None,
        };
        Some(s)
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Defaults overridden by `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Every key in sorted order, one `key = value` line each.
    pub fn canonical(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("every listed key is readable")))
            .collect()
    }

    pub fn fingerprint(&self) -> String {
        short_hash(self.canonical().as_bytes())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            beta: self.beta,
            n_generate: self.train_generate,
            toggles: self.toggles,
            cons_reduction: self.cons_reduction,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            n_way: self.train_n_way,
            k_shot: self.train_k_shot,
            queries: self.train_queries,
            episodes: self.train_episodes,
            lr: self.train_lr,
            loss: self.loss_config(),
            seed: self.seed,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            n_way: self.eval_n_way,
            k_shot: self.eval_k_shot,
            queries: self.eval_queries,
            n_generate: self.eval_generate,
            episodes: self.eval_episodes,
            seed: self.seed,
            toggles: self.toggles,
            classifier: self.classifier,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.train_config().validate()?;
        let mut eval = self.eval_config();
        // a generator switched on for training may be left unused at test time
        if eval.n_generate == 0 {
            eval.toggles.vsgm = false;
        }
        eval.validate()
    }
}
