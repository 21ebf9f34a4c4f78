//! Attention-based re-representation of support features.
//!
//! The self-attention block ([`SfmParams`]) mixes the tokens of a single
//! support feature. The cross-attention block ([`IfmParams`]) lets every
//! support token attend to the pooled query feature, so the result depends
//! on which query is being classified.
//!
//! Both blocks use post-norm transformer-encoder wiring:
//!
//! ```text
//! h   = LN₁(z + Attention(z·W_Q, c·W_K, c·W_V) [· W_O])
//! out = LN₂(h + W₂·act(W₁·h + b₁) + b₂)
//! ```
//!
//! with `c = z` (plus positional encoding) for self-attention and `c` the
//! pooled query for cross-attention. Only the self-attention block has an
//! output projection `W_O`.
//!
//! Graph-level functions operate on batches: `B` items of `r` tokens are
//! stacked into a `B·r × d` matrix and attention never crosses items.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Real, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            _ => Err(Error::config(format!("unknown activation {s:?} (relu|tanh)"))),
        }
    }

    pub(crate) fn apply<T: Real>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

/// Sinusoidal position table: `table[p][2i] = sin(p / 10000^(2i/d))`,
/// `table[p][2i+1] = cos(p / 10000^(2i/d))`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncoding {
    table: Tensor<f32>,
}

impl PositionalEncoding {
    pub fn new(max_tokens: usize, dim: usize) -> Self {
        let mut data = Vec::with_capacity(max_tokens * dim);
        for p in 0..max_tokens {
            for c in 0..dim {
                let i2 = (c - c % 2) as f64;
                let angle = p as f64 / 10000f64.powf(i2 / dim as f64);
                data.push(if c % 2 == 0 { angle.sin() } else { angle.cos() } as f32);
            }
        }
        Self {
            table: Tensor::from_vec(max_tokens, dim, data).expect("positive extents"),
        }
    }

    pub fn max_tokens(&self) -> usize {
        self.table.rows()
    }

    pub fn table(&self) -> &Tensor<f32> {
        &self.table
    }

    /// The first `tokens` rows repeated `items` times.
    fn tiled<T: Real>(&self, tokens: usize, items: usize) -> Result<Tensor<T>> {
        if tokens > self.table.rows() {
            return Err(Error::shape(format!(
                "{tokens} tokens exceed the positional table of {} rows",
                self.table.rows()
            )));
        }
        let d = self.table.cols();
        let block: Vec<T> = self.table.data()[..tokens * d].iter().map(|&x| T::of(x)).collect();
        let mut data = Vec::with_capacity(items * block.len());
        for _ in 0..items {
            data.extend_from_slice(&block);
        }
        Tensor::from_vec(items * tokens, d, data)
    }
}

/// Splits a feature into `tokens` rows of width `dim`.
///
/// A feature with `tokens > 1` is read as a channel-major `dim × h × w`
/// map, so token `t` collects channel values at spatial position `t`.
pub fn tokenize(feature: &[f32], tokens: usize, dim: usize) -> Result<Tensor<f32>> {
    if tokens == 0 || dim == 0 || feature.len() != tokens * dim {
        return Err(Error::shape(format!(
            "feature of length {} cannot be viewed as {tokens} tokens of width {dim}",
            feature.len()
        )));
    }
    let mut data = vec![0.0; feature.len()];
    for t in 0..tokens {
        for c in 0..dim {
            data[t * dim + c] = feature[c * tokens + t];
        }
    }
    Tensor::from_vec(tokens, dim, data)
}

/// Inverse of [`tokenize`].
pub fn flatten_tokens(tokens: &Tensor<f32>) -> Vec<f32> {
    let (r, d) = (tokens.rows(), tokens.cols());
    let mut out = vec![0.0; r * d];
    for t in 0..r {
        for c in 0..d {
            out[c * r + t] = tokens.get(t, c);
        }
    }
    out
}

/// Arithmetic mean over the tokens of a single feature.
pub fn pool_query(tokens: &Tensor<f32>) -> Tensor<f32> {
    let mut g = Graph::new();
    let x = g.constant(tokens.clone());
    let m = g.mean_rows(x);
    g.value(m).clone()
}

/// Single-group multi-head attention without gradient recording.
pub fn attention(q: &Tensor<f32>, k: &Tensor<f32>, v: &Tensor<f32>, heads: usize) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = g.attention(q, k, v, heads, 1)?;
    Ok(g.value(out).clone())
}

/// `x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T = f32> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            w: Tensor::zeros(d_in, d_out),
            b: Tensor::zeros(1, d_out),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, rg: bool) -> LinearVars {
        LinearVars {
            w: g.leaf(self.w.clone(), rg),
            b: g.leaf(self.b.clone(), rg),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

impl LinearVars {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.w)?;
        g.add_row(y, self.b)
    }
}

pub(crate) fn normal_fill(rng: &mut Rng, t: &mut Tensor<f32>, std: f32) {
    if std == 0.0 {
        return;
    }
    let dist = Normal::new(0.0f32, std).expect("positive std");
    for x in t.data_mut() {
        *x = dist.sample(rng);
    }
}

/// Weights of the self-attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct SfmParams<T = f32> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub mlp_w1: Tensor<T>,
    pub mlp_b1: Tensor<T>,
    pub mlp_w2: Tensor<T>,
    pub mlp_b2: Tensor<T>,
    pub n_heads: usize,
}

/// Weights of the cross-attention block. Same layout as [`SfmParams`]
/// without the output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct IfmParams<T = f32> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub mlp_w1: Tensor<T>,
    pub mlp_b1: Tensor<T>,
    pub mlp_w2: Tensor<T>,
    pub mlp_b2: Tensor<T>,
    pub n_heads: usize,
}

macro_rules! param_fields {
    ($ty:ident, $($f:ident),+) => {
        impl<T: Real> $ty<T> {
            pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
                vec![$((stringify!($f), &self.$f)),+]
            }

            pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
                vec![$((stringify!($f), &mut self.$f)),+]
            }

            pub fn param_count(&self) -> usize {
                self.named().iter().map(|(_, t)| t.len()).sum()
            }

            pub fn cast<U: Real>(&self) -> $ty<U> {
                $ty { $($f: self.$f.cast()),+, n_heads: self.n_heads }
            }
        }
    };
}

param_fields!(SfmParams, w_q, w_k, w_v, w_o, ln1_gain, ln1_bias, ln2_gain, ln2_bias, mlp_w1, mlp_b1, mlp_w2, mlp_b2);
param_fields!(IfmParams, w_q, w_k, w_v, ln1_gain, ln1_bias, ln2_gain, ln2_bias, mlp_w1, mlp_b1, mlp_w2, mlp_b2);

/// Graph handles for one transformer block; `w_o` is absent for the
/// cross-attention block.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Option<Var>,
    pub ln1: (Var, Var),
    pub ln2: (Var, Var),
    pub fc1: LinearVars,
    pub fc2: LinearVars,
    pub heads: usize,
}

fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::config(format!("width {d} is not divisible by {heads} heads")));
    }
    Ok(())
}

impl SfmParams<f32> {
    /// Zero projections and MLP, unit LayerNorm gains.
    pub fn zeros(d: usize, d_ff: usize, heads: usize) -> Result<Self> {
        check_heads(d, heads)?;
        Ok(Self {
            w_q: Tensor::zeros(d, d),
            w_k: Tensor::zeros(d, d),
            w_v: Tensor::zeros(d, d),
            w_o: Tensor::zeros(d, d),
            ln1_gain: Tensor::ones(1, d),
            ln1_bias: Tensor::zeros(1, d),
            ln2_gain: Tensor::ones(1, d),
            ln2_bias: Tensor::zeros(1, d),
            mlp_w1: Tensor::zeros(d, d_ff),
            mlp_b1: Tensor::zeros(1, d_ff),
            mlp_w2: Tensor::zeros(d_ff, d),
            mlp_b2: Tensor::zeros(1, d),
            n_heads: heads,
        })
    }

    pub fn init(d: usize, d_ff: usize, heads: usize, std: f32, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::zeros(d, d_ff, heads)?;
        for w in [&mut p.w_q, &mut p.w_k, &mut p.w_v, &mut p.w_o, &mut p.mlp_w1, &mut p.mlp_w2] {
            normal_fill(rng, w, std);
        }
        Ok(p)
    }
}

impl IfmParams<f32> {
    pub fn zeros(d: usize, d_ff: usize, heads: usize) -> Result<Self> {
        check_heads(d, heads)?;
        Ok(Self {
            w_q: Tensor::zeros(d, d),
            w_k: Tensor::zeros(d, d),
            w_v: Tensor::zeros(d, d),
            ln1_gain: Tensor::ones(1, d),
            ln1_bias: Tensor::zeros(1, d),
            ln2_gain: Tensor::ones(1, d),
            ln2_bias: Tensor::zeros(1, d),
            mlp_w1: Tensor::zeros(d, d_ff),
            mlp_b1: Tensor::zeros(1, d_ff),
            mlp_w2: Tensor::zeros(d_ff, d),
            mlp_b2: Tensor::zeros(1, d),
            n_heads: heads,
        })
    }

    pub fn init(d: usize, d_ff: usize, heads: usize, std: f32, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::zeros(d, d_ff, heads)?;
        for w in [&mut p.w_q, &mut p.w_k, &mut p.w_v, &mut p.mlp_w1, &mut p.mlp_w2] {
            normal_fill(rng, w, std);
        }
        Ok(p)
    }
}

impl<T: Real> SfmParams<T> {
    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn bind(&self, g: &mut Graph<T>, rg: bool) -> BlockVars {
        BlockVars {
            w_q: g.leaf(self.w_q.clone(), rg),
            w_k: g.leaf(self.w_k.clone(), rg),
            w_v: g.leaf(self.w_v.clone(), rg),
            w_o: Some(g.leaf(self.w_o.clone(), rg)),
            ln1: (g.leaf(self.ln1_gain.clone(), rg), g.leaf(self.ln1_bias.clone(), rg)),
            ln2: (g.leaf(self.ln2_gain.clone(), rg), g.leaf(self.ln2_bias.clone(), rg)),
            fc1: LinearVars {
                w: g.leaf(self.mlp_w1.clone(), rg),
                b: g.leaf(self.mlp_b1.clone(), rg),
            },
            fc2: LinearVars {
                w: g.leaf(self.mlp_w2.clone(), rg),
                b: g.leaf(self.mlp_b2.clone(), rg),
            },
            heads: self.n_heads,
        }
    }
}

impl<T: Real> IfmParams<T> {
    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn bind(&self, g: &mut Graph<T>, rg: bool) -> BlockVars {
        BlockVars {
            w_q: g.leaf(self.w_q.clone(), rg),
            w_k: g.leaf(self.w_k.clone(), rg),
            w_v: g.leaf(self.w_v.clone(), rg),
            w_o: None,
            ln1: (g.leaf(self.ln1_gain.clone(), rg), g.leaf(self.ln1_bias.clone(), rg)),
            ln2: (g.leaf(self.ln2_gain.clone(), rg), g.leaf(self.ln2_bias.clone(), rg)),
            fc1: LinearVars {
                w: g.leaf(self.mlp_w1.clone(), rg),
                b: g.leaf(self.mlp_b1.clone(), rg),
            },
            fc2: LinearVars {
                w: g.leaf(self.mlp_w2.clone(), rg),
                b: g.leaf(self.mlp_b2.clone(), rg),
            },
            heads: self.n_heads,
        }
    }
}

impl BlockVars {
    /// Handles in the same order as the `named()` list of the owning block.
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.w_q, self.w_k, self.w_v];
        v.extend(self.w_o);
        v.extend([self.ln1.0, self.ln1.1, self.ln2.0, self.ln2.1]);
        v.extend([self.fc1.w, self.fc1.b, self.fc2.w, self.fc2.b]);
        v
    }

    /// Attention sub-layer, residual, LayerNorm, MLP sub-layer, residual,
    /// LayerNorm. `context` supplies keys and values; `groups` items are
    /// processed independently.
    fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        z: Var,
        context: Var,
        groups: usize,
        act: Activation,
    ) -> Result<Var> {
        let eps = T::lit(LN_EPS);
        let q = g.matmul(z, self.w_q)?;
        let k = g.matmul(context, self.w_k)?;
        let v = g.matmul(context, self.w_v)?;
        let mut a = g.attention(q, k, v, self.heads, groups)?;
        if let Some(w_o) = self.w_o {
            a = g.matmul(a, w_o)?;
        }
        let res = g.add(z, a)?;
        let h = g.layer_norm(res, self.ln1.0, self.ln1.1, eps)?;
        let m = self.fc1.forward(g, h)?;
        let m = act.apply(g, m);
        let m = self.fc2.forward(g, m)?;
        let res = g.add(h, m)?;
        g.layer_norm(res, self.ln2.0, self.ln2.1, eps)
    }
}

/// Self-attention block over `x = [B·tokens × d]`.
pub fn sfm_forward<T: Real>(
    g: &mut Graph<T>,
    p: &BlockVars,
    x: Var,
    tokens: usize,
    pe: Option<&PositionalEncoding>,
    act: Activation,
) -> Result<Var> {
    let rows = g.value(x).rows();
    if tokens == 0 || !rows.is_multiple_of(tokens) {
        return Err(Error::shape(format!("{rows} token rows do not split into items of {tokens}")));
    }
    let items = rows / tokens;
    let z = match pe {
        Some(pe) => {
            let e = g.constant(pe.tiled(tokens, items)?);
            g.add(x, e)?
        }
        None => x,
    };
    p.forward(g, z, z, items, act)
}

/// Cross-attention block: item `i` of `z_hat = [B·tokens × d]` attends to
/// row `i` of `pooled = [B × d]`.
pub fn ifm_forward<T: Real>(
    g: &mut Graph<T>,
    p: &BlockVars,
    z_hat: Var,
    pooled: Var,
    tokens: usize,
    act: Activation,
) -> Result<Var> {
    let rows = g.value(z_hat).rows();
    let items = g.value(pooled).rows();
    if tokens == 0 || rows != items * tokens {
        return Err(Error::contract(format!(
            "{rows} support token rows need {} pooled query rows, got {items}",
            rows / tokens.max(1)
        )));
    }
    p.forward(g, z_hat, pooled, items, act)
}

/// Runs the self-attention block on one token matrix.
pub fn sfm_forward_tokens(
    params: &SfmParams,
    x: &Tensor<f32>,
    pe: Option<&PositionalEncoding>,
    act: Activation,
) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let tokens = x.rows();
    let x = g.constant(x.clone());
    let out = sfm_forward(&mut g, &vars, x, tokens, pe, act)?;
    Ok(g.value(out).clone())
}

/// Runs the cross-attention block for one support feature and one pooled
/// query row.
pub fn ifm_forward_tokens(
    params: &IfmParams,
    z_hat: &Tensor<f32>,
    q: &Tensor<f32>,
    act: Activation,
) -> Result<Tensor<f32>> {
    if q.rows() != 1 {
        return Err(Error::contract(format!(
            "pooled query must have exactly one row, got {}",
            q.rows()
        )));
    }
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let z = g.constant(z_hat.clone());
    let q = g.constant(q.clone());
    let out = ifm_forward(&mut g, &vars, z, q, z_hat.rows(), act)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn randn(rows: usize, cols: usize, seed: u64) -> Tensor<f32> {
        let mut t = Tensor::zeros(rows, cols);
        normal_fill(&mut rng_from_seed(seed), &mut t, 1.0);
        t
    }

    /// Per-head loops over plain vectors, written independently of the
    /// graph kernels.
    fn naive_attention(q: &Tensor<f32>, k: &Tensor<f32>, v: &Tensor<f32>, heads: usize) -> Vec<f64> {
        let d = q.cols();
        let dk = d / heads;
        let mut out = vec![0.0f64; q.rows() * d];
        for h in 0..heads {
            for i in 0..q.rows() {
                let scores: Vec<f64> = (0..k.rows())
                    .map(|j| {
                        (0..dk)
                            .map(|c| q.get(i, h * dk + c) as f64 * k.get(j, h * dk + c) as f64)
                            .sum::<f64>()
                            / (dk as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..k.rows() {
                    for c in 0..dk {
                        out[i * d + h * dk + c] += e[j] / z * v.get(j, h * dk + c) as f64;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn positional_table_pattern() {
        let pe = PositionalEncoding::new(5, 6);
        assert_eq!(pe.table().row(0), &[0., 1., 0., 1., 0., 1.]);
        let expect = (3.0f64 / 10000f64.powf(2.0 / 6.0)).cos() as f32;
        assert!((pe.table().get(3, 3) - expect).abs() < 1e-6);
    }

    #[test]
    fn tokenize_examples() {
        let flat: Vec<f32> = (0..512).map(|i| i as f32).collect();
        let t = tokenize(&flat, 1, 512).unwrap();
        assert_eq!(t.data(), &flat[..]);

        // 4 channels × 2 × 2 map, channel-major
        let map: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let t = tokenize(&map, 4, 4).unwrap();
        for tok in 0..4 {
            let (y, x) = (tok / 2, tok % 2);
            for c in 0..4 {
                assert_eq!(t.get(tok, c), map[c * 4 + y * 2 + x]);
            }
        }
        assert_eq!(flatten_tokens(&t), map);
        assert!(matches!(tokenize(&map, 3, 4), Err(Error::Shape(_))));
    }

    #[test]
    fn single_key_returns_value_row() {
        let q = randn(3, 8, 1);
        let k = randn(1, 8, 2);
        let v = randn(1, 8, 3);
        let out = attention(&q, &k, &v, 2).unwrap();
        for i in 0..3 {
            assert_eq!(out.row(i), v.row(0));
        }
    }

    #[test]
    fn zero_scores_average_values() {
        let q = Tensor::zeros(2, 4);
        let k = randn(5, 4, 4);
        let v = randn(5, 4, 5);
        let out = attention(&q, &k, &v, 2).unwrap();
        for c in 0..4 {
            let mean = (0..5).map(|j| v.get(j, c)).sum::<f32>() / 5.0;
            assert!((out.get(0, c) - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn matches_naive_reference() {
        let (q, k, v) = (randn(3, 8, 6), randn(5, 8, 7), randn(5, 8, 8));
        let out = attention(&q, &k, &v, 2).unwrap();
        let reference = naive_attention(&q, &k, &v, 2);
        for (a, b) in out.data().iter().zip(&reference) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn head_divisibility_is_config_error() {
        let q = randn(2, 6, 1);
        assert!(matches!(attention(&q, &q, &q, 4), Err(Error::Config(_))));
    }

    #[test]
    fn pool_query_examples() {
        let t = Tensor::from_rows(&[vec![0.0, 2.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(pool_query(&t).data(), &[1.0, 1.0]);
        let one = Tensor::row_vector(vec![3.0, -1.0]);
        assert_eq!(pool_query(&one), one);
    }
}
