//! The hybrid distance: cosine distance between activation vectors plus a
//! weighted absolute difference along the selected latent axis.
//!
//! Nothing here assumes the triangle inequality; cosine distance itself
//! violates it.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ActivationVector, LatentSlice};
use crate::error::{Result, VistaError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub axis_weight: f64,
    /// Use the min-max normalized activation as the latent axis (otherwise
    /// the raw activation).
    pub use_normalized_axis: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            axis_weight: 1.0,
            use_normalized_axis: true,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.axis_weight.is_finite() && self.axis_weight >= 0.0) {
            return Err(VistaError::invalid(format!(
                "axis_weight must be finite and >= 0, got {}",
                self.axis_weight
            )));
        }
        Ok(())
    }
}

fn cosine_from_parts(dot: f64, sq_norm_u: f64, sq_norm_v: f64) -> f64 {
    // sqrt(s * s) == s exactly, so identical vectors land on 0.0
    (1.0 - dot / (sq_norm_u * sq_norm_v).sqrt()).clamp(0.0, 2.0)
}

/// `1 - cos(u, v)`, clamped into `[0, 2]`.
pub fn cosine_distance(u: &ActivationVector, v: &ActivationVector) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(VistaError::SizeMismatch(format!(
            "dimensionality {} vs {}",
            u.dim(),
            v.dim()
        )));
    }
    let nu = u.dot(u);
    let nv = v.dot(v);
    if nu <= 0.0 || nv <= 0.0 {
        return Err(VistaError::ZeroNorm);
    }
    Ok(cosine_from_parts(u.dot(v), nu, nv))
}

/// Cosine distance plus `axis_weight * |a_u - a_v|`.
pub fn vista_distance(
    u: &ActivationVector,
    v: &ActivationVector,
    a_u: f64,
    a_v: f64,
    cfg: &MetricConfig,
) -> Result<f64> {
    if !a_u.is_finite() || !a_v.is_finite() {
        return Err(VistaError::NonFinite(format!("latent-axis activations {a_u}, {a_v}")));
    }
    Ok(cosine_distance(u, v)? + cfg.axis_weight * (a_u - a_v).abs())
}

/// Symmetric pairwise distances over `len()` points.
///
/// Implementations must return exactly equal values for `(i, j)` and `(j, i)`.
pub trait Distances: Sync {
    fn len(&self) -> usize;

    fn distance(&self, i: usize, j: usize) -> f64;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn fill_row(&self, i: usize, out: &mut [f64]) {
        for (j, slot) in out.iter_mut().enumerate() {
            *slot = self.distance(i, j);
        }
    }
}

impl<D: Distances + ?Sized> Distances for &D {
    fn len(&self) -> usize {
        (**self).len()
    }
    fn distance(&self, i: usize, j: usize) -> f64 {
        (**self).distance(i, j)
    }
    fn fill_row(&self, i: usize, out: &mut [f64]) {
        (**self).fill_row(i, out)
    }
}

/// Dense row-major `n x n` distance matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(VistaError::SizeMismatch(format!(
                "{} entries for a {n}x{n} matrix",
                data.len()
            )));
        }
        Ok(Self { n, data })
    }

    /// Materializes any distance source, rows in parallel.
    pub fn from_distances<D: Distances + ?Sized>(src: &D) -> Self {
        let n = src.len();
        let mut data = vec![0.0; n * n];
        if n > 0 {
            data.par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, row)| src.fill_row(i, row));
        }
        Self { n, data }
    }

    pub fn euclidean(points: &[[f64; 2]]) -> Self {
        Self::from_distances(&EuclideanPoints(points))
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Binary cache: magic `VDM1`, `n` as u64 LE, then `n * n` f64 LE.
    pub fn save(&self, path: &Path) -> Result<()> {
        let ctx = || format!("writing {}", path.display());
        let f = File::create(path).map_err(|e| VistaError::io(ctx(), e))?;
        let mut w = BufWriter::new(f);
        w.write_all(b"VDM1").map_err(|e| VistaError::io(ctx(), e))?;
        w.write_all(&(self.n as u64).to_le_bytes())
            .map_err(|e| VistaError::io(ctx(), e))?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes()).map_err(|e| VistaError::io(ctx(), e))?;
        }
        w.flush().map_err(|e| VistaError::io(ctx(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| VistaError::io(format!("reading {}", path.display()), e))?;
        let bad = |m: &str| VistaError::invalid(format!("{}: {m}", path.display()));
        if bytes.len() < 12 || &bytes[..4] != b"VDM1" {
            return Err(bad("not a distance cache"));
        }
        let n = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
        let body = &bytes[12..];
        if n.checked_mul(n).and_then(|c| c.checked_mul(8)) != Some(body.len()) {
            return Err(bad("truncated distance cache"));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::new(n, data)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

impl Distances for DistanceMatrix {
    fn len(&self) -> usize {
        self.n
    }

    fn distance(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    fn fill_row(&self, i: usize, out: &mut [f64]) {
        out.copy_from_slice(self.row(i));
    }
}

/// Euclidean distance between 2D points.
#[derive(Clone, Copy, Debug)]
pub struct EuclideanPoints<'a>(pub &'a [[f64; 2]]);

impl Distances for EuclideanPoints<'_> {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn distance(&self, i: usize, j: usize) -> f64 {
        let (p, q) = (self.0[i], self.0[j]);
        (p[0] - q[0]).hypot(p[1] - q[1])
    }
}

/// Streaming hybrid distance over a slice; rows are computed on demand so a
/// caller can stay at O(n) memory.
pub struct SliceMetric<'a> {
    vectors: Vec<&'a ActivationVector>,
    sq_norms: Vec<f64>,
    axis: Vec<f64>,
    axis_weight: f64,
}

impl<'a> SliceMetric<'a> {
    pub fn new(slice: &'a LatentSlice, cfg: &MetricConfig) -> Result<Self> {
        cfg.validate()?;
        if slice.is_empty() {
            return Err(VistaError::EmptySlice(slice.latent_id));
        }
        let vectors = slice.vectors();
        let dim = vectors[0].dim();
        let mut sq_norms = Vec::with_capacity(vectors.len());
        for v in &vectors {
            if v.dim() != dim {
                return Err(VistaError::SizeMismatch(format!("dimensionality {} vs {dim}", v.dim())));
            }
            let s = v.dot(v);
            if s <= 0.0 {
                return Err(VistaError::ZeroNorm);
            }
            sq_norms.push(s);
        }
        let axis = slice.axis_values(cfg.use_normalized_axis);
        if let Some(a) = axis.iter().find(|a| !a.is_finite()) {
            return Err(VistaError::NonFinite(format!("latent-axis activation {a}")));
        }
        Ok(Self {
            vectors,
            sq_norms,
            axis,
            axis_weight: cfg.axis_weight,
        })
    }
}

impl Distances for SliceMetric<'_> {
    fn len(&self) -> usize {
        self.vectors.len()
    }

    fn distance(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        let cos = cosine_from_parts(self.vectors[i].dot(self.vectors[j]), self.sq_norms[i], self.sq_norms[j]);
        cos + self.axis_weight * (self.axis[i] - self.axis[j]).abs()
    }
}

/// All pairwise hybrid distances of a slice (zero diagonal, symmetric).
pub fn pairwise_distances(slice: &LatentSlice, cfg: &MetricConfig) -> Result<DistanceMatrix> {
    let metric = SliceMetric::new(slice, cfg)?;
    Ok(DistanceMatrix::from_distances(&metric))
}
