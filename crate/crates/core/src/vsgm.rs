//! Variational sample generation.
//!
//! An MLP encoder maps a reconstructed support feature to a diagonal
//! Gaussian `N(μ, diag(exp(logσ²)))` over an `ℓ`-dimensional latent; an MLP
//! decoder maps latent samples back to feature space. New features are
//! decodes of reparameterized draws `z̃ = μ + exp(logσ²/2)·ε`.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::reconstruction::{normal_fill, Activation, Linear, LinearVars};
use crate::rng::Rng;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Bounds applied to the encoder's log-variance head.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct VsgmParams<T = f32> {
    /// `d → h → … → 2ℓ`; the output is `[μ | logσ²]`.
    pub encoder: Vec<Linear<T>>,
    /// `ℓ → h → … → d`.
    pub decoder: Vec<Linear<T>>,
}

fn layer_widths(d_in: usize, hidden: usize, d_out: usize, depth: usize) -> Vec<(usize, usize)> {
    let mut widths = Vec::with_capacity(depth);
    let mut prev = d_in;
    for i in 0..depth {
        let next = if i + 1 == depth { d_out } else { hidden };
        widths.push((prev, next));
        prev = next;
    }
    widths
}

impl VsgmParams<f32> {
    pub fn zeros(d: usize, hidden: usize, latent: usize, depth: usize) -> Result<Self> {
        if !(1..=3).contains(&depth) {
            return Err(Error::config(format!("VAE depth must be 1, 2 or 3, got {depth}")));
        }
        if d == 0 || hidden == 0 || latent == 0 {
            return Err(Error::config("VAE widths must be positive"));
        }
        let build = |widths: Vec<(usize, usize)>| {
            widths.into_iter().map(|(i, o)| Linear::zeros(i, o)).collect()
        };
        Ok(Self {
            encoder: build(layer_widths(d, hidden, 2 * latent, depth)),
            decoder: build(layer_widths(latent, hidden, d, depth)),
        })
    }

    pub fn init(d: usize, hidden: usize, latent: usize, depth: usize, std: f32, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::zeros(d, hidden, latent, depth)?;
        for l in p.encoder.iter_mut().chain(p.decoder.iter_mut()) {
            normal_fill(rng, &mut l.w, std);
        }
        Ok(p)
    }
}

impl<T: Real> VsgmParams<T> {
    pub fn latent(&self) -> usize {
        self.decoder[0].w.rows()
    }

    pub fn dim(&self) -> usize {
        self.encoder[0].w.rows()
    }

    pub fn depth(&self) -> usize {
        self.encoder.len()
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (side, layers) in [("enc", &self.encoder), ("dec", &self.decoder)] {
            for (i, l) in layers.iter().enumerate() {
                out.push((format!("{side}{i}_w"), &l.w));
                out.push((format!("{side}{i}_b"), &l.b));
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (side, layers) in [("enc", &mut self.encoder), ("dec", &mut self.decoder)] {
            for (i, l) in layers.iter_mut().enumerate() {
                out.push((format!("{side}{i}_w"), &mut l.w));
                out.push((format!("{side}{i}_b"), &mut l.b));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> VsgmParams<U> {
        let c = |ls: &[Linear<T>]| {
            ls.iter()
                .map(|l| Linear {
                    w: l.w.cast(),
                    b: l.b.cast(),
                })
                .collect()
        };
        VsgmParams {
            encoder: c(&self.encoder),
            decoder: c(&self.decoder),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, rg: bool) -> VsgmVars {
        VsgmVars {
            encoder: self.encoder.iter().map(|l| l.bind(g, rg)).collect(),
            decoder: self.decoder.iter().map(|l| l.bind(g, rg)).collect(),
            latent: self.latent(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VsgmVars {
    pub encoder: Vec<LinearVars>,
    pub decoder: Vec<LinearVars>,
    pub latent: usize,
}

impl VsgmVars {
    /// Handles in the order of [`VsgmParams::named`].
    pub fn vars(&self) -> Vec<Var> {
        self.encoder.iter().chain(&self.decoder).flat_map(|l| [l.w, l.b]).collect()
    }
}

fn mlp<T: Real>(g: &mut Graph<T>, layers: &[LinearVars], x: Var, act: Activation) -> Result<Var> {
    let mut h = x;
    for (i, l) in layers.iter().enumerate() {
        h = l.forward(g, h)?;
        if i + 1 < layers.len() {
            h = act.apply(g, h);
        }
    }
    Ok(h)
}

/// Encodes rows of `x` into `(μ, logσ²)`, with `logσ²` clamped to
/// `[LOG_VAR_MIN, LOG_VAR_MAX]`.
pub fn encode<T: Real>(g: &mut Graph<T>, v: &VsgmVars, x: Var, act: Activation) -> Result<(Var, Var)> {
    let expect = g.value(v.encoder[0].w).rows();
    let width = g.value(x).cols();
    if width != expect {
        return Err(Error::shape(format!("encoder expects width {expect}, got {width}")));
    }
    let out = mlp(g, &v.encoder, x, act)?;
    let mu = g.slice_cols(out, 0, v.latent)?;
    let raw = g.slice_cols(out, v.latent, 2 * v.latent)?;
    let log_var = g.clamp(raw, T::lit(LOG_VAR_MIN), T::lit(LOG_VAR_MAX));
    Ok((mu, log_var))
}

/// `μ + exp(logσ²/2) ⊙ ε`; `eps` is a constant so no gradient reaches it.
pub fn reparameterize<T: Real>(g: &mut Graph<T>, mu: Var, log_var: Var, eps: Var) -> Result<Var> {
    let half = g.scale(log_var, T::lit(0.5));
    let std = g.exp(half);
    let noise = g.mul(std, eps)?;
    g.add(mu, noise)
}

pub fn decode<T: Real>(g: &mut Graph<T>, v: &VsgmVars, z: Var, act: Activation) -> Result<Var> {
    let width = g.value(z).cols();
    if width != v.latent {
        return Err(Error::shape(format!("decoder expects latent width {}, got {width}", v.latent)));
    }
    mlp(g, &v.decoder, z, act)
}

/// `½ Σ (μ² + σ² − 1 − logσ²)` summed over every row and latent unit.
pub fn kl_divergence<T: Real>(g: &mut Graph<T>, mu: Var, log_var: Var) -> Result<Var> {
    let n = g.value(mu).len();
    let mu2 = g.square(mu);
    let var = g.exp(log_var);
    let t = g.add(mu2, var)?;
    let t = g.sub(t, log_var)?;
    let s = g.sum(t);
    let s = g.add_scalar(s, -T::count(n));
    Ok(g.scale(s, T::lit(0.5)))
}

/// Squared Euclidean distance summed over all entries.
pub fn reconstruction_loss<T: Real>(g: &mut Graph<T>, original: Var, reconstructed: Var) -> Result<Var> {
    let diff = g.sub(original, reconstructed)?;
    let sq = g.square(diff);
    Ok(g.sum(sq))
}

/// Standard-normal noise, drawn row by row.
pub fn draw_noise(rng: &mut Rng, rows: usize, latent: usize) -> Tensor<f32> {
    let data = (0..rows * latent).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::from_vec(rows, latent, data).expect("positive extents")
}

/// Posterior parameters for one feature, plus an optional sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub mu: Vec<f32>,
    pub log_var: Vec<f32>,
    pub z_tilde: Option<Vec<f32>>,
}

impl LatentCode {
    pub fn new(mu: Vec<f32>, log_var: Vec<f32>) -> Result<Self> {
        if mu.len() != log_var.len() || mu.is_empty() {
            return Err(Error::shape(format!(
                "latent code widths differ: μ {} vs logσ² {}",
                mu.len(),
                log_var.len()
            )));
        }
        Ok(Self {
            mu,
            log_var,
            z_tilde: None,
        })
    }

    /// Closed-form KL divergence to the standard normal prior.
    pub fn kl_divergence(&self) -> f64 {
        0.5 * self
            .mu
            .iter()
            .zip(&self.log_var)
            .map(|(&m, &lv)| {
                let (m, lv) = (m as f64, lv as f64);
                m * m + lv.exp() - 1.0 - lv
            })
            .sum::<f64>()
    }

    /// Draws `z̃` with the log-variance clamped to its bounds.
    pub fn reparameterize(&self, rng: &mut Rng) -> Vec<f32> {
        self.mu
            .iter()
            .zip(&self.log_var)
            .map(|(&m, &lv)| {
                let lv = lv.clamp(LOG_VAR_MIN as f32, LOG_VAR_MAX as f32);
                m + (0.5 * lv).exp() * rng.sample::<f32, _>(StandardNormal)
            })
            .collect()
    }
}

impl VsgmParams<f32> {
    /// Encodes one `1×d` feature.
    pub fn encode_feature(&self, feature: &Tensor<f32>, act: Activation) -> Result<LatentCode> {
        let mut g = Graph::new();
        let v = self.bind(&mut g, false);
        let x = g.constant(feature.clone());
        let (mu, lv) = encode(&mut g, &v, x, act)?;
        LatentCode::new(g.value(mu).data().to_vec(), g.value(lv).data().to_vec())
    }

    pub fn decode_latent(&self, z: &[f32], act: Activation) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let v = self.bind(&mut g, false);
        let z = g.constant(Tensor::row_vector(z.to_vec()));
        let out = decode(&mut g, &v, z, act)?;
        Ok(g.value(out).clone())
    }

    /// `n` decodes of independent reparameterized draws for one feature.
    /// The input feature itself is not part of the output.
    pub fn generate(&self, feature: &Tensor<f32>, n: usize, rng: &mut Rng, act: Activation) -> Result<Vec<Tensor<f32>>> {
        if n == 0 {
            return Err(Error::config("generate needs n ≥ 1"));
        }
        let code = self.encode_feature(feature, act)?;
        (0..n)
            .map(|_| self.decode_latent(&code.reparameterize(rng), act))
            .collect()
    }
}

/// Squared Euclidean distance between two equal-width rows.
pub fn reconstruction_loss_rows(original: &[f32], reconstructed: &[f32]) -> Result<f32> {
    if original.len() != reconstructed.len() {
        return Err(Error::shape(format!(
            "reconstruction loss widths differ: {} vs {}",
            original.len(),
            reconstructed.len()
        )));
    }
    Ok(original
        .iter()
        .zip(reconstructed)
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}
