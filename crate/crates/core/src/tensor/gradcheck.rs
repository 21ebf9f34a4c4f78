//! Central finite-difference gradient checks.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Perturbation half-width.
    pub h: f64,
    pub rtol: f64,
    /// Entries where both gradients are smaller than this are compared on an
    /// absolute scale of `floor` instead of relative to their own magnitude.
    pub floor: f64,
    /// Smallest step tried when a perturbation crosses a kink.
    pub min_h: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-3,
            rtol: 1e-3,
            floor: 1e-2,
            min_h: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub group: String,
    pub max_rel_err: f64,
    pub entries: usize,
    /// Entries whose `±h` probe crossed a kink and were re-measured with a
    /// smaller step.
    pub rescaled: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub groups: Vec<GroupReport>,
    pub rtol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }
}

/// One evaluation of the checked function.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub value: f64,
    /// One gradient per parameter tensor, when requested.
    pub grads: Option<Vec<Tensor<f64>>>,
    /// Piecewise-region signature (see [`crate::tensor::Graph::kink_signature`]).
    pub kinks: Option<u64>,
}

impl Probe {
    pub fn new(value: f64, grads: Option<Vec<Tensor<f64>>>) -> Self {
        Self { value, grads, kinks: None }
    }

    pub fn with_kinks(mut self, kinks: Option<u64>) -> Self {
        self.kinks = kinks;
        self
    }
}

/// Compares analytic gradients against central differences.
///
/// `f(params, want_grad)` evaluates the scalar loss and, when `want_grad` is
/// set, one gradient per parameter tensor. `params` pairs each tensor with
/// the name of the group it is reported under. `f` must be deterministic:
/// it is evaluated twice at the base point and any difference makes the
/// check invalid.
///
/// A central difference over an interval containing a ReLU or clamp kink
/// does not estimate the derivative. When `f` reports kink signatures and a
/// `±h` probe lands on a different linear piece than the base point, that
/// entry is measured again with `h/10`, `h/100`, ... down to `min_h`. Every
/// entry is still compared at `rtol`.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &[(String, Tensor<f64>)],
    cfg: &GradCheckConfig,
) -> Result<GradReport>
where
    F: FnMut(&[Tensor<f64>], bool) -> Result<Probe>,
{
    let mut point: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let first = f(&point, true)?;
    let (base, kinks) = (first.value, first.kinks);
    let grads = first
        .grads
        .ok_or_else(|| Error::InvalidCheck("no analytic gradient returned".into()))?;
    let again = f(&point, false)?;
    if base.to_bits() != again.value.to_bits() || kinks != again.kinks {
        return Err(Error::InvalidCheck(format!(
            "function is not deterministic: {base} then {}",
            again.value
        )));
    }
    if grads.len() != point.len() {
        return Err(Error::InvalidCheck(format!(
            "{} gradients for {} parameters",
            grads.len(),
            point.len()
        )));
    }

    let mut groups: Vec<GroupReport> = Vec::new();
    for (i, (group, _)) in params.iter().enumerate() {
        if grads[i].len() != point[i].len() {
            return Err(Error::InvalidCheck(format!("gradient {i} has the wrong size")));
        }
        let mut worst = 0.0f64;
        let mut rescaled = 0;
        for j in 0..point[i].len() {
            let orig = point[i].data()[j];
            let mut h = cfg.h;
            let numeric = loop {
                point[i].data_mut()[j] = orig + h;
                let plus = f(&point, false)?;
                point[i].data_mut()[j] = orig - h;
                let minus = f(&point, false)?;
                point[i].data_mut()[j] = orig;
                let smooth = plus.kinks == kinks && minus.kinks == kinks;
                if smooth || h / 10.0 < cfg.min_h {
                    break (plus.value - minus.value) / (2.0 * h);
                }
                if h == cfg.h {
                    rescaled += 1;
                }
                h /= 10.0;
            };
            let analytic = grads[i].data()[j];
            let scale = analytic.abs().max(numeric.abs()).max(cfg.floor);
            let err = (analytic - numeric).abs() / scale;
            if !err.is_finite() {
                worst = f64::INFINITY;
            } else {
                worst = worst.max(err);
            }
        }
        match groups.iter_mut().find(|g| &g.group == group) {
            Some(g) => {
                g.max_rel_err = g.max_rel_err.max(worst);
                g.entries += point[i].len();
                g.rescaled += rescaled;
            }
            None => groups.push(GroupReport {
                group: group.clone(),
                max_rel_err: worst,
                entries: point[i].len(),
                rescaled,
                passed: false,
            }),
        }
    }
    for g in &mut groups {
        g.passed = g.max_rel_err <= cfg.rtol;
    }
    Ok(GradReport {
        groups,
        rtol: cfg.rtol,
    })
}
