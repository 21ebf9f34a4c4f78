//! Frozen-model episodic evaluation.
//!
//! Every query is classified on its own: the support set is re-represented
//! (self-attention once per episode, cross-attention against that query's
//! pooled tokens), each support is amplified into `n` generated features, a
//! fresh linear classifier is trained on the `N·k·(n+1)` features and the
//! query is predicted. Generation noise depends only on the episode seed and
//! the support index, so removing a query cannot change any other
//! prediction. With the cross-attention block off, the classifier is the
//! same for every query and is trained once.

pub mod classifier;
pub mod report;

use std::time::Instant;

use crate::data::{sample_episode, EmbeddingDataset, Episode, DEFAULT_QUERIES};
use crate::error::{Error, Result};
use crate::model::{ModelParams, ModelVars, Toggles};
use crate::par;
use crate::reconstruction::{flatten_tokens, ifm_forward, sfm_forward, tokenize};
use crate::rng::{derive_rng, derive_seed};
use crate::tensor::{Graph, Tensor, Var};
use crate::vsgm::{decode, draw_noise, encode, reparameterize};

pub use classifier::{train_online_classifier, ClassifierConfig, LinearClassifier};
pub use report::{compare_paired, mean_ci95, EvalReport, PairedStats};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub queries: usize,
    /// Generated features per support; 0 trains on the raw supports only.
    pub n_generate: usize,
    pub episodes: usize,
    pub seed: u64,
    pub toggles: Toggles,
    pub classifier: ClassifierConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            queries: DEFAULT_QUERIES,
            n_generate: 5,
            episodes: 600,
            seed: 0,
            toggles: Toggles::ALL,
            classifier: ClassifierConfig::default(),
        }
    }
}

impl EvalConfig {
    /// The no-augmentation reference: every module off, no generation.
    pub fn baseline(&self) -> Self {
        Self {
            n_generate: 0,
            toggles: Toggles::NONE,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.k_shot == 0 || self.queries == 0 {
            return Err(Error::config(format!(
                "evaluation episodes need n_way ≥ 2, k_shot ≥ 1 and queries ≥ 1, got {}/{}/{}",
                self.n_way, self.k_shot, self.queries
            )));
        }
        if self.episodes == 0 {
            return Err(Error::config("evaluation needs at least one episode"));
        }
        if self.toggles.vsgm && self.n_generate == 0 {
            return Err(Error::config("the generator is on but n_generate is 0"));
        }
        self.classifier.validate()
    }

    pub fn episode_seed(&self, index: usize) -> u64 {
        derive_seed(self.seed, "eval", index as u64)
    }

    /// Fields that define the protocol, in a fixed textual form.
    pub fn describe(&self) -> String {
        format!(
            "{}-way {}-shot, {} queries/class, n_generate {}, {}, classifier steps {} lr {} l2 {}",
            self.n_way,
            self.k_shot,
            self.queries,
            self.n_generate,
            self.toggles,
            self.classifier.steps,
            self.classifier.lr,
            self.classifier.l2
        )
    }
}

/// Per-query results of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub predictions: Vec<usize>,
    pub correct: usize,
    /// Size of each classifier training set (one per trained classifier).
    pub train_set_sizes: Vec<usize>,
}

impl EpisodeOutcome {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.predictions.len() as f64
    }
}

/// Support-side work shared by every query of an episode.
struct SupportState {
    g: Graph<f32>,
    vars: ModelVars,
    z_hat: Var,
    noise: Option<Var>,
}

fn check_episode(params: &ModelParams, episode: &Episode, cfg: &EvalConfig) -> Result<()> {
    if episode.dim() != params.dims.feature_len() {
        return Err(Error::Schema(format!(
            "episode features have length {}, the model expects {}",
            episode.dim(),
            params.dims.feature_len()
        )));
    }
    if episode.support.len() != episode.n_way * episode.k_shot {
        return Err(Error::contract("episode needs exactly n_way·k_shot supports"));
    }
    if cfg.toggles.vsgm && cfg.n_generate == 0 {
        return Err(Error::config("the generator is on but n_generate is 0"));
    }
    Ok(())
}

fn prepare(params: &ModelParams, episode: &Episode, cfg: &EvalConfig) -> Result<SupportState> {
    let dims = &params.dims;
    let mut g = Graph::new();
    let vars = params.bind(&mut g, cfg.toggles, false);
    let mut data = Vec::with_capacity(episode.support.len() * dims.feature_len());
    for s in &episode.support {
        data.extend_from_slice(tokenize(&s.feature, dims.tokens, dims.dim)?.data());
    }
    let x = g.constant(Tensor::from_vec(episode.support.len() * dims.tokens, dims.dim, data)?);
    let z_hat = match &vars.sfm {
        Some(p) => sfm_forward(&mut g, p, x, dims.tokens, dims.positional_encoding().as_ref(), dims.activation)?,
        None => x,
    };
    let noise = if vars.vsgm.is_some() {
        let rows = cfg.n_generate * dims.tokens;
        let mut all = Vec::with_capacity(episode.support.len() * rows * dims.latent);
        for s in 0..episode.support.len() {
            let mut rng = derive_rng(episode.seed, "generate", s as u64);
            all.extend_from_slice(draw_noise(&mut rng, rows, dims.latent).data());
        }
        Some(g.constant(Tensor::from_vec(episode.support.len() * rows, dims.latent, all)?))
    } else {
        None
    };
    Ok(SupportState { g, vars, z_hat, noise })
}

/// Builds the classifier training set for one context. `query` is the
/// feature the cross-attention block conditions on, if it is on.
fn training_set(
    params: &ModelParams,
    episode: &Episode,
    cfg: &EvalConfig,
    st: &mut SupportState,
    query: Option<&[f32]>,
) -> Result<Vec<(usize, Vec<f32>)>> {
    let dims = &params.dims;
    let (r, d) = (dims.tokens, dims.dim);
    let s_count = episode.support.len();
    let n = cfg.n_generate;
    let g = &mut st.g;
    let z_dot = match (&st.vars.ifm, query) {
        (Some(p), Some(q)) => {
            let t = tokenize(q, r, d)?;
            let pooled: Vec<f32> = (0..d).map(|c| (0..r).map(|i| t.get(i, c)).sum::<f32>() / r as f32).collect();
            let rep: Vec<f32> = (0..s_count).flat_map(|_| pooled.iter().copied()).collect();
            let pooled = g.constant(Tensor::from_vec(s_count, d, rep)?);
            ifm_forward(g, p, st.z_hat, pooled, r, dims.activation)?
        }
        _ => st.z_hat,
    };

    let generated: Option<Tensor<f32>> = match (&st.vars.vsgm, st.noise) {
        (Some(v), Some(eps)) if n > 0 => {
            let (mu, lv) = encode(g, v, z_dot, dims.activation)?;
            let idx: Vec<usize> = (0..s_count)
                .flat_map(|s| (0..n).flat_map(move |_| (0..r).map(move |t| s * r + t)))
                .collect();
            let mu = g.gather_rows(mu, &idx)?;
            let lv = g.gather_rows(lv, &idx)?;
            let z = reparameterize(g, mu, lv, eps)?;
            let out = decode(g, v, z, dims.activation)?;
            Some(g.value(out).clone())
        }
        _ if n > 0 => {
            // Without the generator every augmented slot holds the
            // reconstructed feature itself.
            let z = g.value(z_dot);
            let mut data = Vec::with_capacity(s_count * n * r * d);
            for s in 0..s_count {
                let block = &z.data()[s * r * d..(s + 1) * r * d];
                for _ in 0..n {
                    data.extend_from_slice(block);
                }
            }
            Some(Tensor::from_vec(s_count * n * r, d, data)?)
        }
        _ => None,
    };

    let mut set = Vec::with_capacity(s_count * (n + 1));
    for (s, shot) in episode.support.iter().enumerate() {
        set.push((shot.label, shot.feature.clone()));
        if let Some(gen) = &generated {
            for i in 0..n {
                let start = (s * n + i) * r * d;
                let tokens = Tensor::from_vec(r, d, gen.data()[start..start + r * d].to_vec())?;
                set.push((shot.label, flatten_tokens(&tokens)));
            }
        }
    }
    let expected = episode.n_way * episode.k_shot * (n + 1);
    if set.len() != expected {
        return Err(Error::contract(format!(
            "classifier training set has {} features, expected {expected}",
            set.len()
        )));
    }
    Ok(set)
}

/// Predicts every query of `episode`.
pub fn predict_episode(params: &ModelParams, episode: &Episode, cfg: &EvalConfig) -> Result<EpisodeOutcome> {
    check_episode(params, episode, cfg)?;
    let mut st = prepare(params, episode, cfg)?;
    let mut predictions = Vec::with_capacity(episode.query.len());
    let mut train_set_sizes = Vec::new();
    if st.vars.ifm.is_some() {
        for q in &episode.query {
            let set = training_set(params, episode, cfg, &mut st, Some(&q.feature))?;
            train_set_sizes.push(set.len());
            let clf = train_online_classifier(&set, episode.n_way, &cfg.classifier)?;
            predictions.push(clf.predict(&q.feature));
        }
    } else {
        let set = training_set(params, episode, cfg, &mut st, None)?;
        train_set_sizes.push(set.len());
        let clf = train_online_classifier(&set, episode.n_way, &cfg.classifier)?;
        predictions.extend(episode.query.iter().map(|q| clf.predict(&q.feature)));
    }
    let correct = predictions.iter().zip(&episode.query).filter(|(p, q)| **p == q.label).count();
    Ok(EpisodeOutcome {
        predictions,
        correct,
        train_set_sizes,
    })
}

pub fn evaluate_episode(params: &ModelParams, episode: &Episode, cfg: &EvalConfig) -> Result<f64> {
    predict_episode(params, episode, cfg).map(|o| o.accuracy())
}

/// Evaluates `cfg.episodes` episodes, in parallel when the `parallel`
/// feature is on. Results are ordered by episode index.
pub fn evaluate(params: &ModelParams, dataset: &EmbeddingDataset, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    dataset.check_capacity(cfg.n_way, cfg.k_shot, cfg.queries)?;
    if dataset.dim() != params.dims.feature_len() {
        return Err(Error::Schema(format!(
            "dataset dim {} does not match model feature length {}",
            dataset.dim(),
            params.dims.feature_len()
        )));
    }
    let start = Instant::now();
    let results = par::map_indexed(cfg.episodes, |i| {
        let ep = sample_episode(dataset, cfg.n_way, cfg.k_shot, cfg.queries, cfg.episode_seed(i))?;
        evaluate_episode(params, &ep, cfg)
    });
    let accuracies = results.into_iter().collect::<Result<Vec<f64>>>()?;
    let mut report = EvalReport::new(accuracies, cfg.seed);
    report.set("config", &crate::config::short_hash(cfg.describe().as_bytes()));
    report.set("model", &params.fingerprint());
    report.set("data", dataset.fingerprint());
    report.set("protocol", &cfg.describe());
    report.wall_time = Some(start.elapsed().as_secs_f64());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::model::ModelDims;

    fn data(dim: usize, sigma: f64) -> EmbeddingDataset {
        generate_synthetic(&SyntheticSpec {
            n_classes: 8,
            dim,
            per_class_count: 20,
            within_class_sigma: sigma,
            heavy_tail_fraction: 0.0,
            seed: 5,
            ..Default::default()
        })
        .unwrap()
    }

    fn small_cfg() -> EvalConfig {
        EvalConfig {
            n_way: 3,
            queries: 3,
            n_generate: 2,
            episodes: 4,
            classifier: ClassifierConfig { steps: 50, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn training_set_size_is_n_k_n_plus_one() {
        let params = ModelParams::init(ModelDims::toy(), 0).unwrap();
        let ds = data(32, 0.3);
        for k in [1, 2] {
            let cfg = EvalConfig { k_shot: k, ..small_cfg() };
            let ep = sample_episode(&ds, 3, k, 3, 1).unwrap();
            let out = predict_episode(&params, &ep, &cfg).unwrap();
            assert_eq!(out.train_set_sizes, vec![3 * k * 3; 9]);
        }
    }

    #[test]
    fn deleting_a_query_keeps_other_predictions() {
        let params = ModelParams::init(ModelDims::toy(), 0).unwrap();
        let ds = data(32, 0.6);
        let cfg = small_cfg();
        let ep = sample_episode(&ds, 3, 1, 3, 2).unwrap();
        let full = predict_episode(&params, &ep, &cfg).unwrap().predictions;
        for i in 0..ep.query.len() {
            let mut expect = full.clone();
            expect.remove(i);
            assert_eq!(predict_episode(&params, &ep.without_query(i), &cfg).unwrap().predictions, expect);
        }
    }

    #[test]
    fn baseline_is_plain_logistic_regression() {
        let params = ModelParams::init(ModelDims::toy(), 0).unwrap();
        let ds = data(32, 0.6);
        let cfg = small_cfg().baseline();
        let ep = sample_episode(&ds, 3, 1, 3, 3).unwrap();
        let feats: Vec<(usize, Vec<f32>)> = ep.support.iter().map(|s| (s.label, s.feature.clone())).collect();
        let clf = train_online_classifier(&feats, 3, &cfg.classifier).unwrap();
        let direct: Vec<usize> = ep.query.iter().map(|q| clf.predict(&q.feature)).collect();
        assert_eq!(predict_episode(&params, &ep, &cfg).unwrap().predictions, direct);
    }

    #[test]
    fn noiseless_data_is_perfect_for_baseline() {
        let params = ModelParams::init(ModelDims::toy(), 0).unwrap();
        let ds = data(32, 1e-6);
        let report = evaluate(&params, &ds, &small_cfg().baseline()).unwrap();
        assert!(report.accuracies.iter().all(|&a| a == 1.0));
    }

    #[test]
    fn evaluation_is_deterministic() {
        let params = ModelParams::init(ModelDims::toy(), 0).unwrap();
        let ds = data(32, 0.6);
        let a = evaluate(&params, &ds, &small_cfg()).unwrap();
        let b = evaluate(&params, &ds, &small_cfg()).unwrap();
        assert_eq!(a.accuracies, b.accuracies);
        assert_eq!(a.header, b.header);
    }
}
