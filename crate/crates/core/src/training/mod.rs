//! Episodic meta-training.
//!
//! Each episode builds one graph holding every query of the episode:
//!
//! 1. support features are tokenized and passed through the self-attention
//!    block once;
//! 2. for every query, the cross-attention block re-expresses all support
//!    tokens against that query's pooled tokens (one *context* per query;
//!    a single shared context when the block is off);
//! 3. the generator encodes each reconstructed support token, draws `n`
//!    latents and decodes them;
//! 4. each support's raw feature and its `n` generated features form the
//!    class centroids used to score the query.
//!
//! `L = L_cons + α·L_KL + β·L_cls`, with the reconstruction and KL terms
//! summed over supports and every term averaged over contexts or queries.
//! One Adam step is taken per episode.

pub mod checkpoint;

use std::fmt;

use crate::data::{sample_episode, EmbeddingDataset, Episode};
use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelParams, ModelVars, Toggles};
use crate::reconstruction::{ifm_forward, sfm_forward, tokenize};
use crate::rng::{derive_rng, derive_seed};
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, Real, Tensor, Var};
use crate::vsgm::{decode, draw_noise, encode, kl_divergence, reparameterize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

/// How squared reconstruction errors are reduced per feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsReduction {
    Sum,
    Mean,
}

impl ConsReduction {
    pub fn name(self) -> &'static str {
        match self {
            ConsReduction::Sum => "sum",
            ConsReduction::Mean => "mean",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(ConsReduction::Sum),
            "mean" => Ok(ConsReduction::Mean),
            _ => Err(Error::config(format!("unknown reconstruction reduction {s:?} (sum|mean)"))),
        }
    }
}

/// Weights and switches of the episode loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Generated features per support.
    pub n_generate: usize,
    pub toggles: Toggles,
    pub cons_reduction: ConsReduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-4,
            beta: 1.0,
            n_generate: 5,
            toggles: Toggles::ALL,
            cons_reduction: ConsReduction::Sum,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.toggles.vsgm && self.n_generate == 0 {
            return Err(Error::config("the generator is on but n_generate is 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub n_way: usize,
    pub k_shot: usize,
    /// Queries per class in each training episode.
    pub queries: usize,
    pub episodes: usize,
    pub lr: f32,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            queries: 15,
            episodes: 10_000,
            lr: 1e-5,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.k_shot == 0 || self.queries == 0 {
            return Err(Error::config(format!(
                "training episodes need n_way ≥ 2, k_shot ≥ 1 and queries ≥ 1, got {}/{}/{}",
                self.n_way, self.k_shot, self.queries
            )));
        }
        AdamConfig::new(self.lr)?;
        self.loss.validate()
    }

    pub fn episode_seed(&self, index: usize) -> u64 {
        derive_seed(self.seed, "train", index as u64)
    }
}

/// Loss handles of one episode graph.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub cons: Var,
    pub kl: Var,
    pub cls: Var,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub cons: f64,
    pub kl: f64,
    pub cls: f64,
}

impl LossValues {
    fn read<T: Real>(g: &Graph<T>, v: &LossVars) -> Self {
        let f = |x: Var| g.value(x).item().to_f64().unwrap_or(f64::NAN);
        Self {
            total: f(v.total),
            cons: f(v.cons),
            kl: f(v.kl),
            cls: f(v.cls),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.cons, self.kl, self.cls].iter().all(|x| x.is_finite())
    }
}

/// Number of latent rows the generator consumes for one episode.
pub fn noise_rows(episode: &Episode, dims: &ModelDims, cfg: &LossConfig) -> usize {
    if !cfg.toggles.vsgm {
        return 0;
    }
    let contexts = if cfg.toggles.ifm { episode.query.len() } else { 1 };
    contexts * episode.support.len() * cfg.n_generate * dims.tokens
}

fn stack_tokens<T: Real>(features: &[&[f32]], dims: &ModelDims) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(features.len() * dims.feature_len());
    for f in features {
        data.extend(tokenize(f, dims.tokens, dims.dim)?.data().iter().map(|&x| T::of(x)));
    }
    Tensor::from_vec(features.len() * dims.tokens, dims.dim, data)
}

fn pooled_row(feature: &[f32], dims: &ModelDims) -> Result<Vec<f32>> {
    let t = tokenize(feature, dims.tokens, dims.dim)?;
    let r = dims.tokens as f32;
    Ok((0..dims.dim)
        .map(|c| (0..dims.tokens).map(|i| t.get(i, c)).sum::<f32>() / r)
        .collect())
}

/// Builds the episode loss in `g`.
///
/// `noise` supplies the standard-normal latent draws (see [`noise_rows`]);
/// it is ignored when the generator is off. Row `((c·S + s)·n + i)·r + t`
/// is the draw for context `c`, support `s`, sample `i`, token `t`.
pub fn build_episode_loss<T: Real>(
    g: &mut Graph<T>,
    vars: &ModelVars,
    dims: &ModelDims,
    episode: &Episode,
    cfg: &LossConfig,
    noise: Option<&Tensor<T>>,
) -> Result<LossVars> {
    let (n_way, k) = (episode.n_way, episode.k_shot);
    let s_count = episode.support.len();
    let m = episode.query.len();
    let (r, d) = (dims.tokens, dims.dim);
    let width = dims.feature_len();
    let n = cfg.n_generate;
    if episode.dim() != width {
        return Err(Error::shape(format!(
            "episode features have length {}, the model expects {r}×{d} = {width}",
            episode.dim()
        )));
    }
    if m == 0 || s_count != n_way * k {
        return Err(Error::contract("episode needs queries and exactly n_way·k_shot supports"));
    }
    let act = dims.activation;
    let support: Vec<&[f32]> = episode.support.iter().map(|s| s.feature.as_slice()).collect();
    let raw_tokens = stack_tokens::<T>(&support, dims)?;
    let x = g.constant(raw_tokens.clone());

    let z_hat = match &vars.sfm {
        Some(p) => sfm_forward(g, p, x, r, dims.positional_encoding().as_ref(), act)?,
        None => x,
    };

    let contexts = if vars.ifm.is_some() { m } else { 1 };
    let z_dot = match &vars.ifm {
        Some(p) => {
            let idx: Vec<usize> = (0..m).flat_map(|_| 0..s_count * r).collect();
            let rep = g.gather_rows(z_hat, &idx)?;
            let mut pooled = Vec::with_capacity(m * s_count * d);
            for q in &episode.query {
                let row = pooled_row(&q.feature, dims)?;
                for _ in 0..s_count {
                    pooled.extend(row.iter().map(|&x| T::of(x)));
                }
            }
            let pooled = g.constant(Tensor::from_vec(m * s_count, d, pooled)?);
            ifm_forward(g, p, rep, pooled, r, act)?
        }
        None => z_hat,
    };

    let zero = || Tensor::scalar(T::zero());
    let (generated, cons, kl) = match &vars.vsgm {
        Some(v) if n > 0 => {
            let rows = contexts * s_count * n * r;
            let noise = noise.ok_or_else(|| Error::contract("generator is on but no noise was supplied"))?;
            if noise.shape() != [rows, dims.latent] {
                return Err(Error::shape(format!(
                    "noise is {}x{}, expected {rows}x{}",
                    noise.rows(),
                    noise.cols(),
                    dims.latent
                )));
            }
            let (mu, lv) = encode(g, v, z_dot, act)?;
            let idx: Vec<usize> = (0..contexts * s_count)
                .flat_map(|item| (0..n).flat_map(move |_| (0..r).map(move |t| item * r + t)))
                .collect();
            let mu_rep = g.gather_rows(mu, &idx)?;
            let lv_rep = g.gather_rows(lv, &idx)?;
            let eps = g.constant(noise.clone());
            let z = reparameterize(g, mu_rep, lv_rep, eps)?;
            let gen = decode(g, v, z, act)?;

            let target = g.gather_rows(z_dot, &idx)?;
            let diff = g.sub(target, gen)?;
            let sq = g.square(diff);
            let sse = g.sum(sq);
            let mut per = T::one() / T::count(n * contexts);
            if cfg.cons_reduction == ConsReduction::Mean {
                per /= T::count(width);
            }
            let cons = g.scale(sse, per);
            let kl = kl_divergence(g, mu, lv)?;
            let kl = g.scale(kl, T::one() / T::count(contexts));

            let flat = g.reshape(gen, contexts * s_count * n, width)?;
            (Some(g.mean_groups(flat, n)?), cons, kl)
        }
        _ => {
            let (c0, k0) = (g.constant(zero()), g.constant(zero()));
            let gen = if n > 0 && (vars.sfm.is_some() || vars.ifm.is_some()) {
                Some(g.reshape(z_dot, contexts * s_count, width)?)
            } else if n > 0 {
                Some(g.constant(raw_tokens.clone().reshape(s_count, width)?))
            } else {
                None
            };
            (gen, c0, k0)
        }
    };

    // Per-support centroid of the raw feature plus n generated features.
    let raw_flat = raw_tokens.reshape(s_count, width)?;
    let raw_rep = {
        let mut data = Vec::with_capacity(contexts * raw_flat.len());
        for _ in 0..contexts {
            data.extend_from_slice(raw_flat.data());
        }
        g.constant(Tensor::from_vec(contexts * s_count, width, data)?)
    };
    let per_support = match generated {
        Some(gm) => {
            let gm = g.scale(gm, T::count(n));
            let sum = g.add(raw_rep, gm)?;
            g.scale(sum, T::one() / T::count(n + 1))
        }
        None => raw_rep,
    };
    let centroids = g.mean_groups(per_support, k)?;

    let cls = {
        let idx: Vec<usize> = (0..m)
            .flat_map(|j| {
                let c = if contexts == 1 { 0 } else { j };
                (0..n_way).map(move |w| c * n_way + w)
            })
            .collect();
        let cent = g.gather_rows(centroids, &idx)?;
        let query: Vec<&[f32]> = episode.query.iter().map(|q| q.feature.as_slice()).collect();
        let qt = stack_tokens::<T>(&query, dims)?.reshape(m, width)?;
        let mut qdata = Vec::with_capacity(m * n_way * width);
        for j in 0..m {
            for _ in 0..n_way {
                qdata.extend_from_slice(qt.row(j));
            }
        }
        let qrep = g.constant(Tensor::from_vec(m * n_way, width, qdata)?);
        let logits = centroid_logits(g, cent, qrep, m, n_way)?;
        let logp = g.log_softmax_rows(logits);
        let labels: Vec<usize> = episode.query.iter().map(|q| q.label).collect();
        let picked = g.pick(logp, &labels)?;
        let s = g.sum(picked);
        g.scale(s, -T::one() / T::count(m))
    };

    let a = g.scale(kl, T::lit(cfg.alpha));
    let b = g.scale(cls, T::lit(cfg.beta));
    let total = g.add(cons, a)?;
    let total = g.add(total, b)?;
    Ok(LossVars { total, cons, kl, cls })
}

/// `−‖q − c‖²` for `m·n_way` (centroid, query) row pairs, as `[m × n_way]`.
fn centroid_logits<T: Real>(g: &mut Graph<T>, cent: Var, qrep: Var, m: usize, n_way: usize) -> Result<Var> {
    let diff = g.sub(qrep, cent)?;
    let sq = g.square(diff);
    let dist = g.sum_cols(sq);
    let dist = g.reshape(dist, m, n_way)?;
    Ok(g.scale(dist, -T::one()))
}

/// Nearest-centroid logits `−‖query − centroid_c‖²` over labeled features.
pub fn classify_differentiable(features: &[(usize, Vec<f32>)], n_way: usize, query: &[f32]) -> Result<Vec<f32>> {
    let width = query.len();
    let mut sums = vec![vec![0.0f64; width]; n_way];
    let mut counts = vec![0usize; n_way];
    for (c, f) in features {
        if *c >= n_way || f.len() != width {
            return Err(Error::shape(format!(
                "feature of class {c} and width {} does not fit {n_way} classes of width {width}",
                f.len()
            )));
        }
        counts[*c] += 1;
        for (s, &x) in sums[*c].iter_mut().zip(f) {
            *s += x as f64;
        }
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::contract(format!("class {c} has no features")));
    }
    let mut g = Graph::<f64>::new();
    let cent: Vec<f64> = sums.iter().zip(&counts).flat_map(|(s, &n)| s.iter().map(move |x| x / n as f64)).collect();
    let cent = g.constant(Tensor::from_vec(n_way, width, cent)?);
    let q: Vec<f64> = (0..n_way).flat_map(|_| query.iter().map(|&x| x as f64)).collect();
    let q = g.constant(Tensor::from_vec(n_way, width, q)?);
    let logits = centroid_logits(&mut g, cent, q, 1, n_way)?;
    Ok(g.value(logits).data().iter().map(|&x| x as f32).collect())
}

/// Evaluates the episode loss without recording gradients.
pub fn episode_loss(
    params: &ModelParams,
    episode: &Episode,
    cfg: &LossConfig,
    rng: &mut crate::rng::Rng,
) -> Result<LossValues> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, cfg.toggles, false);
    let noise = draw_noise_for(episode, &params.dims, cfg, rng);
    let lv = build_episode_loss(&mut g, &vars, &params.dims, episode, cfg, noise.as_ref())?;
    Ok(LossValues::read(&g, &lv))
}

fn draw_noise_for(
    episode: &Episode,
    dims: &ModelDims,
    cfg: &LossConfig,
    rng: &mut crate::rng::Rng,
) -> Option<Tensor<f32>> {
    let rows = noise_rows(episode, dims, cfg);
    (rows > 0).then(|| draw_noise(rng, rows, dims.latent))
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLine {
    pub episode: usize,
    pub loss: LossValues,
}

impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let l = &self.loss;
        write!(f, "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}", self.episode, l.total, l.cons, l.kl, l.cls)
    }
}

/// Parameters plus optimizer state between episodes.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    pub episode: usize,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        let adam = AdamState::new(params.tensor_sizes());
        Self {
            params,
            adam,
            episode: 0,
        }
    }

    /// Samples episode `self.episode`, takes one optimizer step and returns
    /// its log line.
    pub fn step(&mut self, dataset: &EmbeddingDataset, cfg: &TrainConfig) -> Result<LogLine> {
        let index = self.episode;
        let seed = cfg.episode_seed(index);
        let episode = sample_episode(dataset, cfg.n_way, cfg.k_shot, cfg.queries, seed)?;
        let dims = self.params.dims;
        let noise = draw_noise_for(&episode, &dims, &cfg.loss, &mut derive_rng(seed, "noise", 0));

        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, cfg.loss.toggles, true);
        let lv = build_episode_loss(&mut g, &vars, &dims, &episode, &cfg.loss, noise.as_ref())?;
        let loss = LossValues::read(&g, &lv);
        if !loss.is_finite() {
            return Err(Error::TrainingFault {
                episode: index as u64,
                seed,
                message: format!(
                    "non-finite loss (total {}, cons {}, kl {}, cls {})",
                    loss.total, loss.cons, loss.kl, loss.cls
                ),
            });
        }
        g.backward(lv.total)?;
        let grads = self.params.collect_grads(&g, &vars);
        if grads.iter().flatten().any(|t| !t.is_finite()) {
            return Err(Error::TrainingFault {
                episode: index as u64,
                seed,
                message: "non-finite gradient".into(),
            });
        }
        let adam = AdamConfig::new(cfg.lr)?;
        let mut named = self.params.named_mut();
        let mut tensors: Vec<&mut Tensor<f32>> = named.iter_mut().map(|(_, t)| &mut **t).collect();
        adam_step(&mut tensors, &grads, &mut self.adam, &adam)?;
        self.episode += 1;
        Ok(LogLine { episode: index, loss })
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<LogLine>,
}

/// Initializes from `cfg.seed` and trains for `cfg.episodes` episodes.
pub fn train(dataset: &EmbeddingDataset, dims: ModelDims, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(dataset, ModelParams::init(dims, cfg.seed)?, cfg, |_| {})
}

/// Trains from given parameters, calling `on_line` after every episode.
pub fn train_with(
    dataset: &EmbeddingDataset,
    params: ModelParams,
    cfg: &TrainConfig,
    mut on_line: impl FnMut(&LogLine),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    params.dims.validate()?;
    if dataset.dim() != params.dims.feature_len() {
        return Err(Error::Schema(format!(
            "dataset dim {} does not match model feature length {}",
            dataset.dim(),
            params.dims.feature_len()
        )));
    }
    dataset.check_capacity(cfg.n_way, cfg.k_shot, cfg.queries)?;
    let mut state = TrainState::new(params);
    let mut log = Vec::with_capacity(cfg.episodes);
    for _ in 0..cfg.episodes {
        let line = state.step(dataset, cfg)?;
        on_line(&line);
        log.push(line);
    }
    Ok(TrainOutcome {
        params: state.params,
        log,
    })
}
