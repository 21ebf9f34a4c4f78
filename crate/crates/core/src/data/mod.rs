//! Embedding datasets and episode sampling.
//!
//! Features arrive as flat vectors grouped by class id, exported from a
//! frozen backbone (see [`fseb`] for the file format) or generated by
//! [`synthetic`]. Episodes relabel their classes `0..n_way`.

pub mod fseb;
pub mod synthetic;

use std::collections::BTreeMap;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

pub use fseb::{load_embeddings, read_manifest, save_embeddings, save_embeddings_with_source};
pub use synthetic::{generate_synthetic, generate_synthetic_with_centroids, SyntheticSpec};

/// Queries per class used by the standard evaluation protocol.
pub const DEFAULT_QUERIES: usize = 15;

/// Class-grouped feature vectors of a single width.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    dim: usize,
    classes: BTreeMap<u64, Vec<Vec<f32>>>,
    fingerprint: String,
}

impl EmbeddingDataset {
    pub fn new(dim: usize, classes: BTreeMap<u64, Vec<Vec<f32>>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Schema("feature dimension must be positive".into()));
        }
        if classes.is_empty() {
            return Err(Error::Schema("dataset has no classes".into()));
        }
        for (id, vecs) in &classes {
            if vecs.is_empty() {
                return Err(Error::Schema(format!("class {id} has no vectors")));
            }
            if let Some(v) = vecs.iter().find(|v| v.len() != dim) {
                return Err(Error::Schema(format!(
                    "class {id} holds a vector of length {} in a dim-{dim} dataset",
                    v.len()
                )));
            }
            if vecs.iter().flatten().any(|x| !x.is_finite()) {
                return Err(Error::Schema(format!("class {id} holds a non-finite value")));
            }
        }
        let mut ds = Self {
            dim,
            classes,
            fingerprint: String::new(),
        };
        ds.fingerprint = crate::config::short_hash(&fseb::encode(&ds));
        Ok(ds)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> &BTreeMap<u64, Vec<Vec<f32>>> {
        &self.classes
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn n_vectors(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    /// Content hash of the canonical FSEB encoding.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Checks that `(n_way, k_shot, q_per_class)` episodes can be drawn.
    pub fn check_capacity(&self, n_way: usize, k_shot: usize, q_per_class: usize) -> Result<()> {
        if n_way == 0 || k_shot == 0 || q_per_class == 0 {
            return Err(Error::config(format!(
                "episode shape must be positive, got {n_way}-way {k_shot}-shot {q_per_class} queries"
            )));
        }
        if self.classes.len() < n_way {
            return Err(Error::Capacity(format!(
                "{n_way}-way episodes need {n_way} classes, dataset has {}",
                self.classes.len()
            )));
        }
        let need = k_shot + q_per_class;
        if let Some((id, v)) = self.classes.iter().find(|(_, v)| v.len() < need) {
            return Err(Error::Capacity(format!(
                "class {id} has {} vectors, {k_shot}-shot with {q_per_class} queries needs {need}",
                v.len()
            )));
        }
        Ok(())
    }
}

/// One labeled item of an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Shot {
    /// Episode-local class index in `0..n_way`.
    pub label: usize,
    /// Position of the vector inside its dataset class.
    pub source: usize,
    pub feature: Vec<f32>,
}

/// An N-way K-shot task. Support and query are grouped by label in
/// ascending order.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
    pub support: Vec<Shot>,
    pub query: Vec<Shot>,
    /// `class_ids[label]` is the dataset class id behind episode label `label`.
    pub class_ids: Vec<u64>,
    pub seed: u64,
}

impl Episode {
    pub fn dim(&self) -> usize {
        self.support[0].feature.len()
    }

    /// Copy without the query at `index`.
    pub fn without_query(&self, index: usize) -> Self {
        let mut ep = self.clone();
        ep.query.remove(index);
        ep
    }
}

/// Draws an episode. Identical seeds give identical episodes.
pub fn sample_episode(
    dataset: &EmbeddingDataset,
    n_way: usize,
    k_shot: usize,
    q_per_class: usize,
    seed: u64,
) -> Result<Episode> {
    dataset.check_capacity(n_way, k_shot, q_per_class)?;
    let mut rng = rng_from_seed(seed);
    let ids: Vec<u64> = dataset.classes.keys().copied().collect();
    let picked = index::sample(&mut rng, ids.len(), n_way);

    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * q_per_class);
    let mut class_ids = Vec::with_capacity(n_way);
    for (label, ci) in picked.iter().enumerate() {
        let id = ids[ci];
        class_ids.push(id);
        let vecs = &dataset.classes[&id];
        let members = index::sample(&mut rng, vecs.len(), k_shot + q_per_class);
        for (j, src) in members.iter().enumerate() {
            let shot = Shot {
                label,
                source: src,
                feature: vecs[src].clone(),
            };
            if j < k_shot {
                support.push(shot);
            } else {
                query.push(shot);
            }
        }
    }
    Ok(Episode {
        n_way,
        k_shot,
        q_per_class,
        support,
        query,
        class_ids,
        seed,
    })
}
