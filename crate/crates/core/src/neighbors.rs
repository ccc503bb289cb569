//! Exact kNN graphs and the chance-calibrated mutual-kNN gain.
//!
//! Mutual-kNN between two spaces over the same items is the mean fraction of
//! shared k-nearest neighbors per item. Two unrelated spaces still share
//! `k / (n - 1)` of their neighbors on average, so the reported *gain*
//! subtracts that chance level: zero in expectation for unrelated spaces,
//! at most `1 - k/(n-1)`, at least `-k/(n-1)`.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VistaError};
use crate::metric::Distances;

/// Per-point k nearest neighbors, ascending by distance, ties by index.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnGraph {
    n: usize,
    k: usize,
    neighbors: Vec<usize>,
    distances: Vec<f64>,
}

impl KnnGraph {
    /// Builds a graph from flattened `n * k` rows, checking the invariants.
    pub fn from_parts(n: usize, k: usize, neighbors: Vec<usize>, distances: Vec<f64>) -> Result<Self> {
        if k == 0 || k >= n {
            return Err(VistaError::invalid(format!("k = {k} outside [1, {n})")));
        }
        if neighbors.len() != n * k || distances.len() != n * k {
            return Err(VistaError::SizeMismatch(format!(
                "expected {} entries, got {} neighbors and {} distances",
                n * k,
                neighbors.len(),
                distances.len()
            )));
        }
        for i in 0..n {
            let row = &neighbors[i * k..(i + 1) * k];
            let dist = &distances[i * k..(i + 1) * k];
            if row.iter().any(|&j| j >= n || j == i) {
                return Err(VistaError::invalid(format!(
                    "row {i} has a self or out-of-range neighbor"
                )));
            }
            if dist.windows(2).any(|w| w[0] > w[1]) {
                return Err(VistaError::invalid(format!("row {i} distances are not non-decreasing")));
            }
        }
        Ok(Self {
            n,
            k,
            neighbors,
            distances,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    pub fn distances(&self, i: usize) -> &[f64] {
        &self.distances[i * self.k..(i + 1) * self.k]
    }

    /// Iterates `(i, j, d)` over every directed edge.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| {
            self.neighbors(i)
                .iter()
                .zip(self.distances(i))
                .map(move |(&j, &d)| (i, j, d))
        })
    }
}

/// Brute-force exact kNN over any distance source.
pub fn knn_exact<D: Distances + ?Sized>(dist: &D, k: usize) -> Result<KnnGraph> {
    let n = dist.len();
    if k == 0 || k >= n {
        return Err(VistaError::invalid(format!("k = {k} outside [1, {n}) for {n} points")));
    }
    let rows: Vec<(Vec<usize>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map_init(
            || (vec![0.0; n], Vec::with_capacity(n)),
            |(row, cand), i| {
                dist.fill_row(i, row);
                cand.clear();
                cand.extend(row.iter().enumerate().filter(|&(j, _)| j != i).map(|(j, &d)| (d, j)));
                let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
                if k < cand.len() {
                    cand.select_nth_unstable_by(k - 1, by_dist);
                    cand.truncate(k);
                }
                cand.sort_unstable_by(by_dist);
                cand.iter().map(|&(d, j)| (j, d)).unzip()
            },
        )
        .collect();
    let mut neighbors = Vec::with_capacity(n * k);
    let mut distances = Vec::with_capacity(n * k);
    for (nb, d) in rows {
        neighbors.extend(nb);
        distances.extend(d);
    }
    Ok(KnnGraph {
        n,
        k,
        neighbors,
        distances,
    })
}

/// Mean over points of `|top-k(a, i) ∩ top-k(b, i)| / k`.
pub fn mutual_knn(ga: &KnnGraph, gb: &KnnGraph, k: usize) -> Result<f64> {
    if ga.n != gb.n {
        return Err(VistaError::SizeMismatch(format!(
            "graphs over {} and {} points",
            ga.n, gb.n
        )));
    }
    if k == 0 || k > ga.k.min(gb.k) {
        return Err(VistaError::invalid(format!(
            "k = {k} exceeds graph neighbor counts ({}, {})",
            ga.k, gb.k
        )));
    }
    let n = ga.n;
    let shared: u64 = (0..n)
        .into_par_iter()
        .map_init(
            || vec![usize::MAX; n],
            |mark, i| {
                for &j in &gb.neighbors(i)[..k] {
                    mark[j] = i;
                }
                ga.neighbors(i)[..k].iter().filter(|&&j| mark[j] == i).count() as u64
            },
        )
        .sum();
    Ok(shared as f64 / (n as f64 * k as f64))
}

/// Expected overlap fraction of two independent uniform k-subsets of the
/// `n - 1` candidate neighbors: `k / (n - 1)`.
pub fn chance_level(k: usize, n: usize) -> Result<f64> {
    if n <= 1 {
        return Err(VistaError::invalid(format!("chance level undefined for n = {n}")));
    }
    if k == 0 || k >= n {
        return Err(VistaError::invalid(format!("k = {k} outside [1, {n})")));
    }
    Ok(k as f64 / (n - 1) as f64)
}

pub fn mknn_gain(mknn: f64, k: usize, n: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&mknn) {
        return Err(VistaError::invalid(format!("mutual-kNN {mknn} outside [0, 1]")));
    }
    Ok(mknn - chance_level(k, n)?)
}

/// `max(1, round(fraction * n))`.
pub fn k_from_fraction(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).round() as usize).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainPoint {
    pub k_fraction: f64,
    pub k: usize,
    pub mknn: f64,
    pub gain: f64,
}

/// Mutual-kNN gain sampled at increasing neighborhood fractions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainCurve {
    pub n: usize,
    pub points: Vec<GainPoint>,
}

impl GainCurve {
    /// Curve point of maximal gain; the smallest k wins ties.
    pub fn argmax(&self) -> Option<&GainPoint> {
        self.points.iter().fold(None, |best: Option<&GainPoint>, p| match best {
            Some(b) if b.gain >= p.gain => Some(b),
            _ => Some(p),
        })
    }

    pub fn max_gain(&self) -> Option<f64> {
        self.argmax().map(|p| p.gain)
    }

    /// CSV with header `k_fraction,k,mknn,gain`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k_fraction,k,mknn,gain\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{},{}", p.k_fraction, p.k, p.mknn, p.gain);
        }
        out
    }

    pub fn from_csv(src: &str, n: usize) -> Result<Self> {
        let mut lines = src.lines();
        if lines.next().map(str::trim) != Some("k_fraction,k,mknn,gain") {
            return Err(VistaError::invalid("gain curve CSV header mismatch"));
        }
        let points = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                let bad = || VistaError::invalid(format!("bad gain curve row {l:?}"));
                if f.len() != 4 {
                    return Err(bad());
                }
                Ok(GainPoint {
                    k_fraction: f[0].trim().parse().map_err(|_| bad())?,
                    k: f[1].trim().parse().map_err(|_| bad())?,
                    mknn: f[2].trim().parse().map_err(|_| bad())?,
                    gain: f[3].trim().parse().map_err(|_| bad())?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { n, points })
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| VistaError::io(format!("writing {}", path.display()), e))
    }
}

fn check_fractions(fractions: &[f64], n: usize) -> Result<Vec<usize>> {
    if fractions.is_empty() {
        return Err(VistaError::invalid("no k fractions given"));
    }
    if fractions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(VistaError::invalid("k fractions must be strictly increasing"));
    }
    fractions
        .iter()
        .map(|&f| {
            if !(f > 0.0 && f < 1.0) {
                return Err(VistaError::invalid(format!("k fraction {f} outside (0, 1)")));
            }
            let k = k_from_fraction(f, n);
            if k >= n {
                return Err(VistaError::invalid(format!("k fraction {f} gives k = {k} >= n = {n}")));
            }
            Ok(k)
        })
        .collect()
}

/// Gain of space `b` against space `a` at each neighborhood fraction.
pub fn gain_curve<A, B>(space_a: &A, space_b: &B, k_fractions: &[f64]) -> Result<GainCurve>
where
    A: Distances + ?Sized,
    B: Distances + ?Sized,
{
    let n = space_a.len();
    if space_b.len() != n {
        return Err(VistaError::SizeMismatch(format!(
            "spaces of {n} and {} points",
            space_b.len()
        )));
    }
    let ks = check_fractions(k_fractions, n)?;
    let k_max = *ks.iter().max().expect("non-empty");
    // neighbor rows are a strict total order, so prefixes of the k_max graph
    // are exactly the smaller-k graphs
    let ga = knn_exact(space_a, k_max)?;
    let gb = knn_exact(space_b, k_max)?;
    let points = k_fractions
        .iter()
        .zip(ks)
        .map(|(&k_fraction, k)| {
            let mknn = mutual_knn(&ga, &gb, k)?;
            Ok(GainPoint {
                k_fraction,
                k,
                mknn,
                gain: mknn_gain(mknn, k, n)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(GainCurve { n, points })
}

/// Restriction of a distance source to a subset of its points.
pub struct Subset<'a, D: ?Sized> {
    inner: &'a D,
    index: &'a [usize],
}

impl<'a, D: Distances + ?Sized> Subset<'a, D> {
    pub fn new(inner: &'a D, index: &'a [usize]) -> Self {
        Self { inner, index }
    }
}

impl<D: Distances + ?Sized> Distances for Subset<'_, D> {
    fn len(&self) -> usize {
        self.index.len()
    }

    fn distance(&self, i: usize, j: usize) -> f64 {
        self.inner.distance(self.index[i], self.index[j])
    }
}

/// Minimum subsample size accepted by [`subsample_gain`].
pub const MIN_SUBSAMPLE: usize = 50;

/// Gain estimated on `m` points drawn uniformly without replacement.
pub fn subsample_gain<A, B>(space_a: &A, space_b: &B, k_fraction: f64, m: usize, seed: u64) -> Result<f64>
where
    A: Distances + ?Sized,
    B: Distances + ?Sized,
{
    let n = space_a.len();
    if space_b.len() != n {
        return Err(VistaError::SizeMismatch(format!(
            "spaces of {n} and {} points",
            space_b.len()
        )));
    }
    if m < MIN_SUBSAMPLE || m > n {
        return Err(VistaError::invalid(format!(
            "subsample size {m} outside [{MIN_SUBSAMPLE}, {n}]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut index = rand::seq::index::sample(&mut rng, n, m).into_vec();
    // ascending order keeps index tie-breaking identical to the full set
    index.sort_unstable();
    let curve = gain_curve(
        &Subset::new(space_a, &index),
        &Subset::new(space_b, &index),
        &[k_fraction],
    )?;
    Ok(curve.points[0].gain)
}
