//! Gaussian-cluster feature datasets with known class centroids.
//!
//! Class `c` has centroid `μ_c ~ N(0, centroid_scale²·I)`; its members are
//! `μ_c + s·ε` with `ε ~ N(0, I)` and `s = within_class_sigma`, except that
//! each member is independently a heavy-tail draw with probability
//! `heavy_tail_fraction`, in which case `s` is tripled.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::rng::derive_rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub per_class_count: usize,
    pub centroid_scale: f64,
    pub within_class_sigma: f64,
    pub heavy_tail_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            dim: 64,
            per_class_count: 50,
            centroid_scale: 1.0,
            within_class_sigma: 0.3,
            heavy_tail_fraction: 0.1,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.dim == 0 || self.per_class_count == 0 {
            return Err(Error::config("synthetic classes, dim and per-class count must be positive"));
        }
        if !(self.within_class_sigma > 0.0) || !self.within_class_sigma.is_finite() {
            return Err(Error::config(format!(
                "within-class sigma must be positive, got {}",
                self.within_class_sigma
            )));
        }
        if !(0.0..1.0).contains(&self.heavy_tail_fraction) {
            return Err(Error::config(format!(
                "heavy-tail fraction must lie in [0, 1), got {}",
                self.heavy_tail_fraction
            )));
        }
        if !(self.centroid_scale >= 0.0) || !self.centroid_scale.is_finite() {
            return Err(Error::config("centroid scale must be finite and non-negative"));
        }
        Ok(())
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<EmbeddingDataset> {
    generate_synthetic_with_centroids(spec).map(|(ds, _)| ds)
}

/// Same as [`generate_synthetic`], also returning the true centroids indexed
/// by class id.
pub fn generate_synthetic_with_centroids(
    spec: &SyntheticSpec,
) -> Result<(EmbeddingDataset, Vec<Vec<f64>>)> {
    spec.validate()?;
    let mut classes = BTreeMap::new();
    let mut centroids = Vec::with_capacity(spec.n_classes);
    for c in 0..spec.n_classes {
        let mut crng = derive_rng(spec.seed, "synthetic-centroid", c as u64);
        let centroid: Vec<f64> = (0..spec.dim)
            .map(|_| spec.centroid_scale * crng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut mrng = derive_rng(spec.seed, "synthetic-members", c as u64);
        let members = (0..spec.per_class_count)
            .map(|_| {
                let tail = mrng.random::<f64>() < spec.heavy_tail_fraction;
                let s = spec.within_class_sigma * if tail { 3.0 } else { 1.0 };
                centroid
                    .iter()
                    .map(|&m| (m + s * mrng.sample::<f64, _>(StandardNormal)) as f32)
                    .collect()
            })
            .collect();
        classes.insert(c as u64, members);
        centroids.push(centroid);
    }
    Ok((EmbeddingDataset::new(spec.dim, classes)?, centroids))
}
