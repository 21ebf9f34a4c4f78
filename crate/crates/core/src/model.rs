//! Model dimensions, the full parameter set and parameter budgets.

use std::fmt;

use crate::error::{Error, Result};
use crate::reconstruction::{Activation, BlockVars, IfmParams, PositionalEncoding, SfmParams};
use crate::rng::derive_rng;
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::vsgm::{VsgmParams, VsgmVars};

/// Standard deviation of the initial weight draw.
pub const INIT_STD: f32 = 0.02;

/// Parameter budgets at default dimensions.
pub const SFM_BUDGET: usize = 1_660_000;
pub const IFM_BUDGET: usize = 1_240_000;
pub const VSGM_BUDGET: usize = 790_000;
pub const TOTAL_BUDGET: usize = 3_690_000;
/// Allowed relative deviation from a budget.
pub const BUDGET_TOLERANCE: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    /// Token width `d`.
    pub dim: usize,
    pub d_ff: usize,
    /// Latent width `ℓ`.
    pub latent: usize,
    pub vae_hidden: usize,
    pub heads: usize,
    pub vae_depth: usize,
    /// Tokens per feature `r`; input features have length `r·d`.
    pub tokens: usize,
    pub activation: Activation,
    pub positional: bool,
}

impl ModelDims {
    pub fn default_dims() -> Self {
        Self {
            dim: 512,
            d_ff: 512,
            latent: 128,
            vae_hidden: 512,
            heads: 4,
            vae_depth: 2,
            tokens: 1,
            activation: Activation::Relu,
            positional: true,
        }
    }

    /// Small dims used by gradient checks.
    pub fn toy() -> Self {
        Self {
            dim: 8,
            d_ff: 8,
            latent: 4,
            vae_hidden: 8,
            heads: 2,
            vae_depth: 2,
            tokens: 4,
            activation: Activation::Relu,
            positional: true,
        }
    }

    /// Flat input feature length `r·d`.
    pub fn feature_len(&self) -> usize {
        self.dim * self.tokens
    }

    pub fn is_default(&self) -> bool {
        let d = Self::default_dims();
        (self.dim, self.d_ff, self.latent, self.vae_hidden, self.vae_depth)
            == (d.dim, d.d_ff, d.latent, d.vae_hidden, d.vae_depth)
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("dim", self.dim),
            ("d_ff", self.d_ff),
            ("latent", self.latent),
            ("vae_hidden", self.vae_hidden),
            ("tokens", self.tokens),
        ];
        if let Some((name, _)) = widths.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(1..=3).contains(&self.vae_depth) {
            return Err(Error::config(format!("vae_depth must be 1, 2 or 3, got {}", self.vae_depth)));
        }
        Ok(())
    }

    pub fn positional_encoding(&self) -> Option<PositionalEncoding> {
        self.positional.then(|| PositionalEncoding::new(self.tokens, self.dim))
    }
}

impl Default for ModelDims {
    fn default() -> Self {
        Self::default_dims()
    }
}

/// Which modules take part in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Toggles {
    pub sfm: bool,
    pub ifm: bool,
    pub vsgm: bool,
}

impl Toggles {
    pub const ALL: Toggles = Toggles {
        sfm: true,
        ifm: true,
        vsgm: true,
    };
    pub const NONE: Toggles = Toggles {
        sfm: false,
        ifm: false,
        vsgm: false,
    };

    pub fn enabled(&self, group: &str) -> bool {
        match group {
            "sfm" => self.sfm,
            "ifm" => self.ifm,
            "vsgm" => self.vsgm,
            _ => false,
        }
    }
}

impl Default for Toggles {
    fn default() -> Self {
        Self::ALL
    }
}

impl fmt::Display for Toggles {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let on = |b: bool| if b { "on" } else { "off" };
        write!(f, "sfm={} ifm={} vsgm={}", on(self.sfm), on(self.ifm), on(self.vsgm))
    }
}

pub const GROUPS: [&str; 3] = ["sfm", "ifm", "vsgm"];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    pub dims: ModelDims,
    pub sfm: SfmParams<T>,
    pub ifm: IfmParams<T>,
    pub vsgm: VsgmParams<T>,
}

impl ModelParams<f32> {
    /// Weights `N(0, INIT_STD²)`, biases zero, LayerNorm gains one. Each
    /// module draws from its own stream split off `seed`.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let ModelDims {
            dim,
            d_ff,
            latent,
            vae_hidden,
            heads,
            vae_depth,
            ..
        } = dims;
        Ok(Self {
            dims,
            sfm: SfmParams::init(dim, d_ff, heads, INIT_STD, &mut derive_rng(seed, "init-sfm", 0))?,
            ifm: IfmParams::init(dim, d_ff, heads, INIT_STD, &mut derive_rng(seed, "init-ifm", 0))?,
            vsgm: VsgmParams::init(
                dim,
                vae_hidden,
                latent,
                vae_depth,
                INIT_STD,
                &mut derive_rng(seed, "init-vsgm", 0),
            )?,
        })
    }

    /// Content hash of the dimensions and every tensor.
    pub fn fingerprint(&self) -> String {
        let mut bytes = format!("{:?}", self.dims).into_bytes();
        for (name, t) in self.named() {
            bytes.extend_from_slice(name.as_bytes());
            for x in t.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        crate::config::short_hash(&bytes)
    }

    /// All weights and biases zero, LayerNorm gains one.
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        Ok(Self {
            dims,
            sfm: SfmParams::zeros(dims.dim, dims.d_ff, dims.heads)?,
            ifm: IfmParams::zeros(dims.dim, dims.d_ff, dims.heads)?,
            vsgm: VsgmParams::zeros(dims.dim, dims.vae_hidden, dims.latent, dims.vae_depth)?,
        })
    }
}

impl<T: Real> ModelParams<T> {
    /// Every tensor as `(group.name, tensor)`, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        out.extend(self.sfm.named().into_iter().map(|(n, t)| (format!("sfm.{n}"), t)));
        out.extend(self.ifm.named().into_iter().map(|(n, t)| (format!("ifm.{n}"), t)));
        out.extend(self.vsgm.named().into_iter().map(|(n, t)| (format!("vsgm.{n}"), t)));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        out.extend(self.sfm.named_mut().into_iter().map(|(n, t)| (format!("sfm.{n}"), t)));
        out.extend(self.ifm.named_mut().into_iter().map(|(n, t)| (format!("ifm.{n}"), t)));
        out.extend(self.vsgm.named_mut().into_iter().map(|(n, t)| (format!("vsgm.{n}"), t)));
        out
    }

    pub fn tensor_sizes(&self) -> Vec<usize> {
        self.named().iter().map(|(_, t)| t.len()).collect()
    }

    pub fn group_counts(&self) -> [(&'static str, usize); 3] {
        [
            ("sfm", self.sfm.param_count()),
            ("ifm", self.ifm.param_count()),
            ("vsgm", self.vsgm.param_count()),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.group_counts().iter().map(|(_, c)| c).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            dims: self.dims,
            sfm: self.sfm.cast(),
            ifm: self.ifm.cast(),
            vsgm: self.vsgm.cast(),
        }
    }

    /// Binds the enabled modules into `g`. Disabled modules get no graph
    /// nodes, so they receive no gradient.
    pub fn bind(&self, g: &mut Graph<T>, toggles: Toggles, rg: bool) -> ModelVars {
        ModelVars {
            sfm: toggles.sfm.then(|| self.sfm.bind(g, rg)),
            ifm: toggles.ifm.then(|| self.ifm.bind(g, rg)),
            vsgm: toggles.vsgm.then(|| self.vsgm.bind(g, rg)),
        }
    }

    /// Gradients in the order of [`named`](Self::named); `None` for tensors
    /// of disabled modules.
    pub fn collect_grads(&self, g: &Graph<T>, vars: &ModelVars) -> Vec<Option<Tensor<T>>> {
        let mut out = Vec::new();
        let mut take = |vs: Option<Vec<Var>>, n: usize| match vs {
            Some(vs) => out.extend(vs.into_iter().map(|v| g.grad(v))),
            None => out.extend(std::iter::repeat_with(|| None).take(n)),
        };
        take(vars.sfm.as_ref().map(BlockVars::vars), self.sfm.named().len());
        take(vars.ifm.as_ref().map(BlockVars::vars), self.ifm.named().len());
        take(vars.vsgm.as_ref().map(VsgmVars::vars), self.vsgm.named().len());
        out
    }
}

/// Graph handles for the enabled modules.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub sfm: Option<BlockVars>,
    pub ifm: Option<BlockVars>,
    pub vsgm: Option<VsgmVars>,
}

/// One row of a budget comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetLine {
    pub group: &'static str,
    pub count: usize,
    pub budget: usize,
}

impl BudgetLine {
    pub fn deviation(&self) -> f64 {
        (self.count as f64 - self.budget as f64) / self.budget as f64
    }

    pub fn within(&self) -> bool {
        self.deviation().abs() <= BUDGET_TOLERANCE
    }
}

/// Counts against the budgets for each module and the total.
pub fn budget_lines<T: Real>(params: &ModelParams<T>) -> Vec<BudgetLine> {
    let [(_, s), (_, i), (_, v)] = params.group_counts();
    vec![
        BudgetLine { group: "sfm", count: s, budget: SFM_BUDGET },
        BudgetLine { group: "ifm", count: i, budget: IFM_BUDGET },
        BudgetLine { group: "vsgm", count: v, budget: VSGM_BUDGET },
        BudgetLine { group: "total", count: s + i + v, budget: TOTAL_BUDGET },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_counts_match_budgets() {
        let p = ModelParams::zeros(ModelDims::default_dims()).unwrap();
        let counts = p.group_counts();
        assert_eq!(counts[0].1, 1_575_936);
        assert_eq!(counts[1].1, 1_313_792);
        assert_eq!(counts[2].1, 722_688);
        assert_eq!(p.param_count(), 3_612_416);
        for line in budget_lines(&p) {
            assert!(line.within(), "{line:?}");
        }
    }

    #[test]
    fn depth_changes_vae_count_only() {
        let mut dims = ModelDims::toy();
        let base = ModelParams::zeros(dims).unwrap().group_counts();
        dims.vae_depth = 3;
        let deeper = ModelParams::zeros(dims).unwrap().group_counts();
        assert_eq!(base[0], deeper[0]);
        assert_eq!(base[1], deeper[1]);
        assert_eq!(deeper[2].1 - base[2].1, 2 * (8 * 8 + 8));
    }

    #[test]
    fn init_is_seeded_and_scaled() {
        let a = ModelParams::init(ModelDims::toy(), 5).unwrap();
        assert_eq!(a, ModelParams::init(ModelDims::toy(), 5).unwrap());
        assert_ne!(a, ModelParams::init(ModelDims::toy(), 6).unwrap());
        assert!(a.sfm.mlp_b1.data().iter().all(|&x| x == 0.0));
        assert!(a.ifm.ln2_gain.data().iter().all(|&x| x == 1.0));
        let big = ModelParams::init(ModelDims::default_dims(), 1).unwrap();
        let w = big.sfm.w_q.data();
        let var = w.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / w.len() as f64;
        assert!((var.sqrt() - 0.02).abs() < 2e-4, "{}", var.sqrt());
    }

    #[test]
    fn named_order_matches_bound_vars() {
        let p = ModelParams::init(ModelDims::toy(), 1).unwrap();
        let mut g = Graph::new();
        let vars = p.bind(&mut g, Toggles::ALL, true);
        let mut all = vars.sfm.unwrap().vars();
        all.extend(vars.ifm.unwrap().vars());
        all.extend(vars.vsgm.unwrap().vars());
        let named = p.named();
        assert_eq!(all.len(), named.len());
        for (v, (name, t)) in all.iter().zip(&named) {
            assert_eq!(g.value(*v), *t, "{name}");
        }
    }

    #[test]
    fn invalid_dims() {
        let mut d = ModelDims::toy();
        d.heads = 3;
        assert!(matches!(d.validate(), Err(Error::Config(_))));
        let mut d = ModelDims::toy();
        d.vae_depth = 0;
        assert!(matches!(ModelParams::init(d, 0), Err(Error::Config(_))));
    }
}
