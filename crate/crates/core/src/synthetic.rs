//! Labeled synthetic corpora for tests and demos.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{ActivationVector, Corpus, Entry, Item};
use crate::error::{Result, VistaError};

const TOPICS: [&str; 8] = [
    "harbor", "orchard", "glacier", "market", "forest", "canyon", "library", "meadow",
];
const DETAILS: [&str; 6] = ["at dawn", "in rain", "under snow", "at dusk", "in fog", "at noon"];

/// Gaussian clusters around pairwise-equidistant centers. One extra latent
/// is active for every item, so a slice on it keeps the whole corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub clusters: usize,
    pub per_cluster: usize,
    pub dim: u32,
    /// Per-coordinate noise standard deviation.
    pub sigma: f64,
    /// Euclidean distance between any two cluster centers.
    pub separation: f64,
    /// Latent carrying the slice activation; `dim - 1` when unset.
    pub latent: Option<u32>,
    /// Mean of the latent coordinate, shared by all clusters.
    pub activation_mean: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            clusters: 5,
            per_cluster: 200,
            dim: 32,
            sigma: 0.1,
            separation: 1.0,
            latent: None,
            activation_mean: 0.5,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn latent(&self) -> u32 {
        self.latent.unwrap_or(self.dim.saturating_sub(1))
    }
}

pub struct SyntheticCorpus {
    pub corpus: Corpus,
    /// Generating cluster of every corpus entry.
    pub labels: Vec<usize>,
}

/// Item `i` belongs to cluster `i % clusters`. Center `k` is
/// `separation / sqrt(2) * e_k + activation_mean * e_latent`; every
/// coordinate gets `N(0, sigma^2)` noise clipped at zero, so vectors stay
/// non-negative like real activations. The latent coordinate is floored at
/// 1e-3 to keep every item in the slice.
pub fn clustered_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    let latent = spec.latent();
    if spec.clusters == 0 || spec.per_cluster == 0 {
        return Err(VistaError::invalid("need at least one cluster and one item"));
    }
    if latent >= spec.dim || spec.clusters as u32 > spec.dim - 1 {
        return Err(VistaError::invalid(format!(
            "{} clusters plus latent {latent} do not fit {} dimensions",
            spec.clusters, spec.dim
        )));
    }
    if !(spec.activation_mean > 0.0 && spec.activation_mean.is_finite()) {
        return Err(VistaError::invalid("activation_mean must be positive"));
    }
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| VistaError::invalid(format!("sigma: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scale = spec.separation / std::f64::consts::SQRT_2;
    let n = spec.clusters * spec.per_cluster;
    let mut entries = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    // center axes skip the latent coordinate
    let axes: Vec<u32> = (0..spec.dim).filter(|&d| d != latent).collect();
    for i in 0..n {
        let k = i % spec.clusters;
        let mut dense = vec![0.0; spec.dim as usize];
        for &d in &axes {
            let center = if d == axes[k] { scale } else { 0.0 };
            dense[d as usize] = (center + noise.sample(&mut rng)).max(0.0);
        }
        dense[latent as usize] = (spec.activation_mean + noise.sample(&mut rng)).max(1e-3);
        let text = format!(
            "{} {} {} sample {i}",
            TOPICS[k % TOPICS.len()],
            DETAILS[(i / spec.clusters) % DETAILS.len()],
            k
        );
        entries.push(Entry {
            item: Item {
                id: format!("s{i:05}"),
                text,
            },
            vector: ActivationVector::from_dense(&dense, spec.dim)?,
        });
        labels.push(k);
    }
    Ok(SyntheticCorpus {
        corpus: Corpus::new(entries, spec.dim)?,
        labels,
    })
}
