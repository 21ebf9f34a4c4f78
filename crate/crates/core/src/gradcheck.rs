//! Finite-difference checks of the full model.
//!
//! Four suites run in `f64` on small dimensions: the self-attention block,
//! the cross-attention block, the generator (reconstruction plus KL through
//! a frozen reparameterization draw) and the complete episode loss.

use crate::data::{generate_synthetic, sample_episode, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelParams, ModelVars, Toggles};
use crate::reconstruction::{ifm_forward, normal_fill, sfm_forward};
use crate::rng::{derive_rng, rng_from_seed};
use crate::tensor::{finite_diff_check, GradCheckConfig, GradReport, Graph, Probe, Tensor, Var};
use crate::training::{build_episode_loss, noise_rows, LossConfig};
use crate::vsgm::{decode, draw_noise, encode, kl_divergence, reconstruction_loss, reparameterize};

/// Weight scale for checks; larger than the training init so every path
/// carries signal.
const CHECK_STD: f32 = 0.3;

/// Episode shape of the composite suite.
pub const TOY_EPISODE: (usize, usize, usize) = (3, 1, 2);

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub report: GradReport,
}

fn randn(rows: usize, cols: usize, seed: u64, std: f32) -> Tensor<f64> {
    let mut t = Tensor::zeros(rows, cols);
    normal_fill(&mut rng_from_seed(seed), &mut t, std);
    t.cast()
}

fn check_params(
    params: &ModelParams<f64>,
    toggles: Toggles,
    prefix: &str,
    label: &str,
    cfg: &GradCheckConfig,
    build: impl Fn(&mut Graph<f64>, &ModelVars) -> Result<Var>,
) -> Result<GradReport> {
    let selected: Vec<usize> = params
        .named()
        .iter()
        .enumerate()
        .filter(|(_, (n, _))| n.starts_with(prefix))
        .map(|(i, _)| i)
        .collect();
    let start: Vec<(String, Tensor<f64>)> = {
        let named = params.named();
        selected
            .iter()
            .map(|&i| {
                let group = named[i].0.split('.').next().unwrap_or_default();
                (format!("{label}{group}"), named[i].1.clone())
            })
            .collect()
    };
    let mut work = params.clone();
    let f = |point: &[Tensor<f64>], want: bool| -> Result<Probe> {
        {
            let mut named = work.named_mut();
            for (&i, t) in selected.iter().zip(point) {
                *named[i].1 = t.clone();
            }
        }
        let mut g = Graph::new();
        g.track_kinks();
        let vars = work.bind(&mut g, toggles, want);
        let loss = build(&mut g, &vars)?;
        let value = g.value(loss).item();
        let kinks = g.kink_signature();
        if !want {
            return Ok(Probe::new(value, None).with_kinks(kinks));
        }
        g.backward(loss)?;
        let all = work.collect_grads(&g, &vars);
        let grads = selected
            .iter()
            .map(|&i| {
                all[i]
                    .clone()
                    .ok_or_else(|| Error::InvalidCheck(format!("no gradient reached tensor {i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Probe::new(value, Some(grads)).with_kinks(kinks))
    };
    finite_diff_check(f, &start, cfg)
}

/// Runs every suite at `dims`. Refuses dimensions larger than the toy
/// setting by more than a small factor, since each entry costs two full
/// forward passes.
pub fn run_all(dims: &ModelDims, seed: u64, cfg: &GradCheckConfig) -> Result<Vec<SuiteReport>> {
    dims.validate()?;
    let probe = ModelParams::zeros(*dims)?;
    if probe.param_count() > 20_000 {
        return Err(Error::config(format!(
            "{} parameters is too many for finite differences; use toy dims",
            probe.param_count()
        )));
    }
    let mut params = ModelParams::zeros(*dims)?;
    {
        let mut rng = derive_rng(seed, "gradcheck-params", 0);
        for (name, t) in params.named_mut() {
            // gains stay near one, everything else random
            if name.contains("gain") {
                normal_fill(&mut rng, t, 0.1);
                t.data_mut().iter_mut().for_each(|x| *x += 1.0);
            } else {
                normal_fill(&mut rng, t, CHECK_STD);
            }
        }
    }
    let p64: ModelParams<f64> = params.cast();
    let (r, d, act) = (dims.tokens, dims.dim, dims.activation);
    let pe = dims.positional_encoding();
    let mut out = Vec::new();

    // self-attention block on two items
    let x = randn(2 * r, d, seed ^ 1, 1.0);
    let w = randn(2 * r, d, seed ^ 2, 1.0);
    let report = check_params(&p64, Toggles { sfm: true, ifm: false, vsgm: false }, "sfm.", "", cfg, |g, v| {
        let x = g.constant(x.clone());
        let y = sfm_forward(g, v.sfm.as_ref().expect("bound"), x, r, pe.as_ref(), act)?;
        let w = g.constant(w.clone());
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    })?;
    out.push(SuiteReport { suite: "sfm", report });

    // cross-attention block: two items, each against its own pooled row
    let z = randn(2 * r, d, seed ^ 3, 1.0);
    let q = randn(2, d, seed ^ 4, 1.0);
    let report = check_params(&p64, Toggles { sfm: false, ifm: true, vsgm: false }, "ifm.", "", cfg, |g, v| {
        let z = g.constant(z.clone());
        let q = g.constant(q.clone());
        let y = ifm_forward(g, v.ifm.as_ref().expect("bound"), z, q, r, act)?;
        let w = g.constant(w.clone());
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    })?;
    out.push(SuiteReport { suite: "ifm", report });

    // generator: reconstruction + KL with frozen noise
    let feats = randn(2 * r, d, seed ^ 5, 1.0);
    let eps: Tensor<f64> = draw_noise(&mut rng_from_seed(seed ^ 6), 2 * r, dims.latent).cast();
    let report = check_params(&p64, Toggles { sfm: false, ifm: false, vsgm: true }, "vsgm.", "", cfg, |g, v| {
        let v = v.vsgm.as_ref().expect("bound");
        let x = g.constant(feats.clone());
        let (mu, lv) = encode(g, v, x, act)?;
        let e = g.constant(eps.clone());
        let zt = reparameterize(g, mu, lv, e)?;
        let rec = decode(g, v, zt, act)?;
        let cons = reconstruction_loss(g, x, rec)?;
        let kl = kl_divergence(g, mu, lv)?;
        g.add(cons, kl)
    })?;
    out.push(SuiteReport { suite: "vsgm", report });

    // composite episode loss
    let (n_way, k, qn) = TOY_EPISODE;
    let ds = generate_synthetic(&SyntheticSpec {
        n_classes: n_way + 2,
        dim: dims.feature_len(),
        per_class_count: k + qn + 2,
        within_class_sigma: 0.5,
        heavy_tail_fraction: 0.0,
        seed,
        ..Default::default()
    })?;
    let ep = sample_episode(&ds, n_way, k, qn, seed)?;
    let loss_cfg = LossConfig::default();
    let rows = noise_rows(&ep, dims, &loss_cfg);
    let noise: Tensor<f64> = draw_noise(&mut rng_from_seed(seed ^ 7), rows, dims.latent).cast();
    let report = check_params(&p64, Toggles::ALL, "", "loss/", cfg, |g, v| {
        let lv = build_episode_loss(g, v, dims, &ep, &loss_cfg, Some(&noise))?;
        Ok(lv.total)
    })?;
    out.push(SuiteReport { suite: "loss", report });
    Ok(out)
}
