//! UMAP-style 2D layout of a latent slice.
//!
//! The kNN graph under the hybrid metric is turned into a fuzzy graph
//! (per-point smooth-kNN calibration followed by a probabilistic union),
//! then optimized in 2D with attractive updates along edges and repulsive
//! updates against uniformly sampled points. The final coordinates are
//! affinely rescaled onto the requested aspect ratio.

use std::cell::Cell;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VistaError};
use crate::metric::{Distances, EuclideanPoints};
use crate::neighbors::{gain_curve, knn_exact, GainCurve, KnnGraph};

/// Height of the final map in map units; the width follows the aspect.
pub const MAP_HEIGHT: f64 = 100.0;

const SIGMA_MIN: f64 = 1e-8;
const SIGMA_MAX: f64 = 1e8;
const INIT_EXTENT: f64 = 10.0;
const GRAD_CLIP: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aspect {
    pub width: f64,
    pub height: f64,
}

impl Default for Aspect {
    fn default() -> Self {
        Self {
            width: 16.0,
            height: 9.0,
        }
    }
}

impl Aspect {
    pub fn ratio(&self) -> f64 {
        self.width / self.height
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width.is_finite() && self.height.is_finite() && self.width > 0.0 && self.height > 0.0) {
            return Err(VistaError::invalid(format!(
                "aspect {}:{} must be positive",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    Spectral,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayoutConfig {
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub spread: f64,
    pub epochs: usize,
    pub negative_sample_rate: usize,
    /// Initial learning rate, decayed linearly to zero.
    pub learning_rate: f64,
    pub init: Init,
    pub seed: u64,
    pub aspect: Aspect,
    /// Lock-free multi-worker edge updates. Results then depend on thread
    /// scheduling; leave off for reproducible layouts.
    pub parallel: bool,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            n_neighbors: 15,
            min_dist: 0.1,
            spread: 1.0,
            epochs: 500,
            negative_sample_rate: 5,
            learning_rate: 1.0,
            init: Init::Spectral,
            seed: 42,
            aspect: Aspect::default(),
            parallel: false,
        }
    }
}

impl LayoutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_neighbors < 2 {
            return Err(VistaError::invalid("n_neighbors must be >= 2"));
        }
        if !(self.min_dist > 0.0 && self.min_dist <= self.spread && self.spread.is_finite()) {
            return Err(VistaError::invalid(format!(
                "need 0 < min_dist <= spread, got min_dist {} spread {}",
                self.min_dist, self.spread
            )));
        }
        if self.epochs == 0 {
            return Err(VistaError::invalid("epochs must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(VistaError::invalid("learning_rate must be positive"));
        }
        self.aspect.validate()
    }
}

/// Smooth-kNN calibration of one ascending distance row.
///
/// `rho` is the smallest positive distance (0 if none); `sigma` is found by
/// geometric bisection so that `sum_j exp(-max(0, d_j - rho) / sigma)` hits
/// `target`, clamped to `[1e-8, 1e8]` when the target cannot be reached.
pub fn calibrate_smooth_knn(row: &[f64], target: f64, tol: f64, max_iter: usize) -> (f64, f64) {
    let rho = row.iter().copied().find(|&d| d > 0.0).unwrap_or(0.0);
    let mass = |sigma: f64| -> f64 { row.iter().map(|&d| (-(d - rho).max(0.0) / sigma).exp()).sum() };
    let (mut lo, mut hi) = (SIGMA_MIN, SIGMA_MAX);
    if mass(lo) >= target - tol {
        return (rho, lo);
    }
    if mass(hi) <= target + tol {
        return (rho, hi);
    }
    let mut mid = (lo * hi).sqrt();
    for _ in 0..max_iter {
        mid = (lo * hi).sqrt();
        let m = mass(mid);
        if (m - target).abs() < tol {
            break;
        }
        if m > target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    (rho, mid)
}

/// Convenience wrapper using `target = log2(k)`, `tol = 1e-5`, 64 iterations.
pub fn calibrate_row(row: &[f64]) -> (f64, f64) {
    calibrate_smooth_knn(row, (row.len() as f64).log2(), 1e-5, 64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FuzzyEdge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// Symmetric fuzzy neighborhood graph, one entry per unordered pair (`i < j`).
#[derive(Clone, Debug, PartialEq)]
pub struct FuzzyGraph {
    pub n: usize,
    pub edges: Vec<FuzzyEdge>,
}

impl FuzzyGraph {
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let key = (i.min(j), i.max(j));
        self.edges
            .binary_search_by(|e| (e.i, e.j).cmp(&key))
            .map_or(0.0, |pos| self.edges[pos].weight)
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.n * self.n];
        for e in &self.edges {
            m[e.i * self.n + e.j] = e.weight;
            m[e.j * self.n + e.i] = e.weight;
        }
        m
    }

    pub fn degrees(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for e in &self.edges {
            d[e.i] += e.weight;
            d[e.j] += e.weight;
        }
        d
    }
}

/// Directed membership strengths `w(i->j)` of a kNN graph, row-major.
pub fn directed_weights(g: &KnnGraph) -> Vec<f64> {
    (0..g.n())
        .flat_map(|i| {
            let row = g.distances(i);
            let (rho, sigma) = calibrate_row(row);
            row.iter()
                .map(move |&d| (-(d - rho).max(0.0) / sigma).exp())
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Probabilistic union `a + b - a*b` of the two directions of an edge.
pub fn fuzzy_union(a: f64, b: f64) -> f64 {
    a + b - a * b
}

pub fn fuzzy_simplicial_set(g: &KnnGraph) -> FuzzyGraph {
    let w = directed_weights(g);
    let k = g.k();
    // (lo, hi, weight of lo->hi, weight of hi->lo)
    let mut directed: Vec<(usize, usize, f64, f64)> = Vec::with_capacity(g.n() * k);
    for i in 0..g.n() {
        for (slot, &j) in g.neighbors(i).iter().enumerate() {
            let wij = w[i * k + slot];
            if i < j {
                directed.push((i, j, wij, 0.0));
            } else {
                directed.push((j, i, 0.0, wij));
            }
        }
    }
    directed.sort_by_key(|x| (x.0, x.1));
    let mut edges: Vec<FuzzyEdge> = Vec::with_capacity(directed.len());
    let mut pending: Option<(usize, usize, f64, f64)> = None;
    let flush = |p: (usize, usize, f64, f64), edges: &mut Vec<FuzzyEdge>| {
        let weight = fuzzy_union(p.2, p.3);
        if weight > 0.0 {
            edges.push(FuzzyEdge { i: p.0, j: p.1, weight });
        }
    };
    for d in directed {
        pending = match pending {
            Some(p) if (p.0, p.1) == (d.0, d.1) => Some((p.0, p.1, p.2.max(d.2), p.3.max(d.3))),
            Some(p) => {
                flush(p, &mut edges);
                Some(d)
            }
            None => Some(d),
        };
    }
    if let Some(p) = pending {
        flush(p, &mut edges);
    }
    FuzzyGraph { n: g.n(), edges }
}

/// Least-squares fit of `1 / (1 + a d^(2b))` to the target curve that is 1
/// up to `min_dist` and decays as `exp(-(d - min_dist) / spread)` beyond,
/// sampled at 300 points on `[0, 3 * spread]` (Levenberg-Marquardt).
pub fn fit_ab(min_dist: f64, spread: f64) -> Result<(f64, f64)> {
    if !(min_dist > 0.0 && min_dist <= spread && spread.is_finite()) {
        return Err(VistaError::invalid(format!(
            "need 0 < min_dist <= spread, got {min_dist}, {spread}"
        )));
    }
    let xs: Vec<f64> = (0..300).map(|i| 3.0 * spread * i as f64 / 299.0).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| target_curve(x, min_dist, spread)).collect();
    let sse = |a: f64, b: f64| -> f64 {
        xs.iter()
            .zip(&ys)
            .map(|(&x, &y)| (curve_phi(x, a, b) - y).powi(2))
            .sum()
    };

    let (mut a, mut b) = (1.0, 1.0);
    let mut cost = sse(a, b);
    let mut lambda = 1e-3;
    for _ in 0..1000 {
        // normal equations of the 2-parameter problem
        let (mut jaa, mut jab, mut jbb, mut ga, mut gb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&x, &y) in xs.iter().zip(&ys) {
            if x <= 0.0 {
                continue;
            }
            let p = x.powf(2.0 * b);
            let denom = 1.0 + a * p;
            let r = 1.0 / denom - y;
            let da = -p / (denom * denom);
            let db = -a * p * 2.0 * x.ln() / (denom * denom);
            jaa += da * da;
            jab += da * db;
            jbb += db * db;
            ga += da * r;
            gb += db * r;
        }
        if ga.abs().max(gb.abs()) < 1e-14 {
            return Ok((a, b));
        }
        let mut accepted = false;
        while lambda < 1e12 {
            let m00 = jaa * (1.0 + lambda);
            let m11 = jbb * (1.0 + lambda);
            let det = m00 * m11 - jab * jab;
            let step_a = -(m11 * ga - jab * gb) / det;
            let step_b = -(m00 * gb - jab * ga) / det;
            let (na, nb) = (a + step_a, b + step_b);
            if na > 0.0 && nb > 0.0 && na.is_finite() && nb.is_finite() {
                let new_cost = sse(na, nb);
                if new_cost <= cost {
                    let rel = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
                    let small_step = step_a.abs() < 1e-12 * a && step_b.abs() < 1e-12 * b;
                    a = na;
                    b = nb;
                    cost = new_cost;
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = true;
                    if rel < 1e-15 || small_step {
                        return Ok((a, b));
                    }
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !accepted {
            // no descent direction left at any damping: at a minimum
            return Ok((a, b));
        }
    }
    Err(VistaError::FitFailure(format!(
        "no convergence for min_dist {min_dist}, spread {spread} (a {a}, b {b})"
    )))
}

pub fn target_curve(d: f64, min_dist: f64, spread: f64) -> f64 {
    if d <= min_dist {
        1.0
    } else {
        (-(d - min_dist) / spread).exp()
    }
}

/// Low-dimensional similarity `1 / (1 + a d^(2b))`.
pub fn curve_phi(d: f64, a: f64, b: f64) -> f64 {
    1.0 / (1.0 + a * d.powf(2.0 * b))
}

/// `-log(phi)` for the squared distance between two points.
pub fn attractive_loss(diff: [f64; 2], a: f64, b: f64) -> f64 {
    let d2 = diff[0] * diff[0] + diff[1] * diff[1];
    (a * d2.powf(b)).ln_1p()
}

/// `-log(1 - phi)` for the squared distance between two points.
pub fn repulsive_loss(diff: [f64; 2], a: f64, b: f64) -> f64 {
    let d2 = diff[0] * diff[0] + diff[1] * diff[1];
    let t = a * d2.powf(b);
    t.ln_1p() - t.ln()
}

/// Gradient of [`attractive_loss`] with respect to the first point, where
/// `diff = y_i - y_j`.
pub fn attractive_gradient(diff: [f64; 2], a: f64, b: f64) -> [f64; 2] {
    let d2 = diff[0] * diff[0] + diff[1] * diff[1];
    if d2 <= 0.0 {
        return [0.0, 0.0];
    }
    let coeff = 2.0 * a * b * d2.powf(b - 1.0) / (1.0 + a * d2.powf(b));
    [coeff * diff[0], coeff * diff[1]]
}

/// Gradient of [`repulsive_loss`] with respect to the first point.
pub fn repulsive_gradient(diff: [f64; 2], a: f64, b: f64) -> [f64; 2] {
    let d2 = diff[0] * diff[0] + diff[1] * diff[1];
    if d2 <= 0.0 {
        return [0.0, 0.0];
    }
    let coeff = -2.0 * b / (d2 * (1.0 + a * d2.powf(b)));
    [coeff * diff[0], coeff * diff[1]]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Bounds {
    pub fn of_points(points: &[[f64; 2]]) -> Option<Self> {
        let first = points.first()?;
        let mut b = Bounds {
            min_x: first[0],
            min_y: first[1],
            max_x: first[0],
            max_y: first[1],
        };
        for p in points {
            b.min_x = b.min_x.min(p[0]);
            b.min_y = b.min_y.min(p[1]);
            b.max_x = b.max_x.max(p[0]);
            b.max_y = b.max_y.max(p[1]);
        }
        Some(b)
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.min_x && p[0] <= self.max_x && p[1] >= self.min_y && p[1] <= self.max_y
    }
}

/// 2D coordinates in map units. The y axis grows downward, like pixel rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding2D {
    pub coords: Vec<[f64; 2]>,
    pub aspect: Aspect,
    pub bounds: Bounds,
}

impl Embedding2D {
    /// Wraps coordinates with explicit bounds (e.g. a padded map frame).
    pub fn new(coords: Vec<[f64; 2]>, bounds: Bounds, aspect: Aspect) -> Result<Self> {
        aspect.validate()?;
        if let Some(p) = coords.iter().find(|p| !(p[0].is_finite() && p[1].is_finite())) {
            return Err(VistaError::NonFinite(format!("coordinate {p:?}")));
        }
        if let Some(p) = coords.iter().find(|p| !bounds.contains(**p)) {
            return Err(VistaError::invalid(format!("point {p:?} outside bounds {bounds:?}")));
        }
        Ok(Self { coords, aspect, bounds })
    }

    /// Affinely rescales each axis onto `[0, MAP_HEIGHT * ratio] x [0, MAP_HEIGHT]`.
    pub fn fit_to_aspect(coords: &[[f64; 2]], aspect: Aspect) -> Result<Self> {
        aspect.validate()?;
        let raw = Bounds::of_points(coords).ok_or_else(|| VistaError::invalid("cannot rescale an empty embedding"))?;
        let (w, h) = (MAP_HEIGHT * aspect.ratio(), MAP_HEIGHT);
        let scale = |v: f64, lo: f64, span: f64, out: f64| {
            if span > 0.0 {
                (v - lo) / span * out
            } else {
                out / 2.0
            }
        };
        let scaled: Vec<[f64; 2]> = coords
            .iter()
            .map(|p| {
                [
                    scale(p[0], raw.min_x, raw.width(), w),
                    scale(p[1], raw.min_y, raw.height(), h),
                ]
            })
            .collect();
        let bounds = Bounds {
            min_x: 0.0,
            min_y: 0.0,
            max_x: w,
            max_y: h,
        };
        Self::new(scaled, bounds, aspect)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Writes `id,x,y` CSV rows in embedding order.
    pub fn write_csv<W: Write>(&self, ids: &[&str], w: W) -> Result<()> {
        if ids.len() != self.len() {
            return Err(VistaError::SizeMismatch(format!(
                "{} ids for {} points",
                ids.len(),
                self.len()
            )));
        }
        let mut out = csv::Writer::from_writer(w);
        let csv_err = |e: csv::Error| VistaError::invalid(format!("embedding CSV: {e}"));
        out.write_record(["id", "x", "y"]).map_err(csv_err)?;
        for (id, p) in ids.iter().zip(&self.coords) {
            out.write_record([id.to_string(), p[0].to_string(), p[1].to_string()])
                .map_err(csv_err)?;
        }
        out.flush().map_err(|e| VistaError::io("writing embedding CSV", e))
    }

    pub fn save_csv(&self, ids: &[&str], path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| VistaError::io(format!("creating {}", path.display()), e))?;
        self.write_csv(ids, std::io::BufWriter::new(f))
    }
}

/// Reads an `id,x,y` CSV into ids and coordinates.
pub fn read_embedding_csv(path: &Path) -> Result<(Vec<String>, Vec<[f64; 2]>)> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| VistaError::invalid(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| VistaError::invalid(format!("{}: {e}", path.display())))?;
    if headers.iter().collect::<Vec<_>>() != ["id", "x", "y"] {
        return Err(VistaError::invalid(format!(
            "{}: expected header id,x,y",
            path.display()
        )));
    }
    let mut ids = Vec::new();
    let mut coords = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let parse_err = |m: String| VistaError::Parse {
            path: path.to_path_buf(),
            line: n + 2,
            message: m,
        };
        let rec = rec.map_err(|e| parse_err(e.to_string()))?;
        let num = |ix: usize| -> Result<f64> {
            rec.get(ix)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(format!("bad coordinate in column {ix}")))
        };
        ids.push(rec.get(0).unwrap_or_default().to_string());
        coords.push([num(1)?, num(2)?]);
    }
    Ok((ids, coords))
}

fn spectral_connected(fg: &FuzzyGraph, rng: &mut ChaCha8Rng) -> Option<Vec<[f64; 2]>> {
    let n = fg.n;
    let deg = fg.degrees();
    if deg.iter().any(|&d| d <= 0.0) {
        return None;
    }
    let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut trivial: Vec<f64> = deg.iter().map(|d| d.sqrt()).collect();
    normalize(&mut trivial);

    // Orthogonal iteration on (I + D^-1/2 W D^-1/2) / 2, whose top
    // eigenvectors are the bottom eigenvectors of the normalized Laplacian.
    let apply = |x: &[f64], out: &mut [f64]| {
        out.iter_mut().zip(x).for_each(|(o, v)| *o = 0.5 * v);
        for e in &fg.edges {
            let w = 0.5 * e.weight * inv_sqrt[e.i] * inv_sqrt[e.j];
            out[e.i] += w * x[e.j];
            out[e.j] += w * x[e.i];
        }
    };
    let mut basis: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut scratch = vec![0.0; n];
    for iter in 0..1000 {
        let mut delta = 0.0f64;
        for c in 0..2 {
            apply(&basis[c], &mut scratch);
            project_out(&mut scratch, &trivial);
            for prev in 0..c {
                let (head, _) = basis.split_at(c);
                project_out(&mut scratch, &head[prev]);
            }
            if normalize(&mut scratch) == 0.0 {
                return None;
            }
            let sign = if dot(&scratch, &basis[c]) < 0.0 { -1.0 } else { 1.0 };
            delta = delta.max(
                scratch
                    .iter()
                    .zip(&basis[c])
                    .map(|(a, b)| (sign * a - b).abs())
                    .fold(0.0, f64::max),
            );
            basis[c].iter_mut().zip(&scratch).for_each(|(b, s)| *b = sign * s);
        }
        if iter > 10 && delta < 1e-10 {
            break;
        }
    }
    let max_abs = basis.iter().flat_map(|v| v.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    if !(max_abs > 0.0 && max_abs.is_finite()) {
        return None;
    }
    Some((0..n).map(|i| [basis[0][i] / max_abs, basis[1][i] / max_abs]).collect())
}

/// Connected components of the graph, members ascending, ordered by their
/// smallest member.
pub fn graph_components(fg: &FuzzyGraph) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..fg.n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for e in &fg.edges {
        let (a, b) = (find(&mut parent, e.i), find(&mut parent, e.j));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut slot = vec![usize::MAX; fg.n];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for v in 0..fg.n {
        let r = find(&mut parent, v);
        if slot[r] == usize::MAX {
            slot[r] = comps.len();
            comps.push(Vec::new());
        }
        comps[slot[r]].push(v);
    }
    comps
}

/// Spectral layout per connected component. Components sit on a square
/// grid of unit spacing, each spread over a disc of radius 0.3 around its
/// cell, and the whole layout is scaled to `INIT_EXTENT`.
fn spectral_init(fg: &FuzzyGraph, rng: &mut ChaCha8Rng) -> Option<Vec<[f64; 2]>> {
    let comps = graph_components(fg);
    let raw = if comps.len() == 1 {
        spectral_connected(fg, rng)?
    } else {
        let cols = (comps.len() as f64).sqrt().ceil() as usize;
        let mut local = vec![0usize; fg.n];
        let mut owner = vec![0usize; fg.n];
        for (c, members) in comps.iter().enumerate() {
            for (l, &v) in members.iter().enumerate() {
                local[v] = l;
                owner[v] = c;
            }
        }
        let mut sub_edges: Vec<Vec<FuzzyEdge>> = vec![Vec::new(); comps.len()];
        for e in &fg.edges {
            sub_edges[owner[e.i]].push(FuzzyEdge {
                i: local[e.i],
                j: local[e.j],
                weight: e.weight,
            });
        }
        let mut raw = vec![[0.0; 2]; fg.n];
        for (c, (members, edges)) in comps.iter().zip(sub_edges).enumerate() {
            let center = [(c % cols) as f64, (c / cols) as f64];
            let sub = FuzzyGraph {
                n: members.len(),
                edges,
            };
            let inner = if members.len() >= 3 {
                spectral_connected(&sub, rng)
            } else {
                None
            };
            let inner = inner.unwrap_or_else(|| {
                (0..members.len())
                    .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                    .collect()
            });
            let radius = inner.iter().map(|p| p[0].hypot(p[1])).fold(0.0, f64::max);
            let scale = if radius > 0.0 { 0.3 / radius } else { 0.0 };
            for (&v, p) in members.iter().zip(inner) {
                raw[v] = [center[0] + scale * p[0], center[1] + scale * p[1]];
            }
        }
        raw
    };
    let mid = |k: usize| {
        let (lo, hi) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p[k]), hi.max(p[k]))
        });
        (0.5 * (lo + hi), 0.5 * (hi - lo))
    };
    let ((cx, hx), (cy, hy)) = (mid(0), mid(1));
    let half = hx.max(hy);
    if !(half > 0.0 && half.is_finite()) {
        return None;
    }
    let expansion = INIT_EXTENT / half;
    Some(
        raw.iter()
            .map(|p| {
                [
                    (p[0] - cx) * expansion + rng.random_range(-1e-4..1e-4),
                    (p[1] - cy) * expansion + rng.random_range(-1e-4..1e-4),
                ]
            })
            .collect(),
    )
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project_out(x: &mut [f64], unit: &[f64]) {
    let p = dot(x, unit);
    x.iter_mut().zip(unit).for_each(|(v, u)| *v -= p * u);
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = dot(x, x).sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

/// Initial coordinates in `[-10, 10]^2`.
pub fn initial_coords(fg: &FuzzyGraph, cfg: &LayoutConfig) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if cfg.init == Init::Spectral {
        if let Some(c) = spectral_init(fg, &mut rng) {
            return c;
        }
        log::warn!("spectral initialization failed; falling back to random");
    }
    (0..fg.n)
        .map(|_| {
            [
                rng.random_range(-INIT_EXTENT..INIT_EXTENT),
                rng.random_range(-INIT_EXTENT..INIT_EXTENT),
            ]
        })
        .collect()
}

trait CoordStore {
    fn get(&self, i: usize) -> [f64; 2];
    fn set(&self, i: usize, p: [f64; 2]);
}

impl CoordStore for [Cell<[f64; 2]>] {
    fn get(&self, i: usize) -> [f64; 2] {
        self[i].get()
    }
    fn set(&self, i: usize, p: [f64; 2]) {
        self[i].set(p)
    }
}

/// Coordinates shared between workers without locking; each component is
/// an f64 bit pattern.
struct AtomicCoords(Vec<AtomicU64>);

impl CoordStore for AtomicCoords {
    fn get(&self, i: usize) -> [f64; 2] {
        [
            f64::from_bits(self.0[2 * i].load(Ordering::Relaxed)),
            f64::from_bits(self.0[2 * i + 1].load(Ordering::Relaxed)),
        ]
    }
    fn set(&self, i: usize, p: [f64; 2]) {
        self.0[2 * i].store(p[0].to_bits(), Ordering::Relaxed);
        self.0[2 * i + 1].store(p[1].to_bits(), Ordering::Relaxed);
    }
}

#[derive(Clone, Copy)]
struct Schedule {
    head: usize,
    tail: usize,
    epochs_per_sample: f64,
    next_sample: f64,
}

struct Sgd {
    a: f64,
    b: f64,
    negatives: usize,
    n: usize,
}

impl Sgd {
    fn run_edges<S: CoordStore + ?Sized>(
        &self,
        store: &S,
        edges: &mut [Schedule],
        epoch: usize,
        alpha: f64,
        rng: &mut ChaCha8Rng,
    ) {
        let clip = |g: f64| g.clamp(-GRAD_CLIP, GRAD_CLIP);
        for e in edges.iter_mut() {
            if e.next_sample > epoch as f64 {
                continue;
            }
            let (i, j) = (e.head, e.tail);
            let (yi, yj) = (store.get(i), store.get(j));
            let g = attractive_gradient([yi[0] - yj[0], yi[1] - yj[1]], self.a, self.b);
            let step = [clip(g[0]) * alpha, clip(g[1]) * alpha];
            store.set(i, [yi[0] - step[0], yi[1] - step[1]]);
            store.set(j, [yj[0] + step[0], yj[1] + step[1]]);

            for _ in 0..self.negatives {
                let k = rng.random_range(0..self.n);
                if k == i {
                    continue;
                }
                let (yi, yk) = (store.get(i), store.get(k));
                let g = repulsive_gradient([yi[0] - yk[0], yi[1] - yk[1]], self.a, self.b);
                store.set(i, [yi[0] - clip(g[0]) * alpha, yi[1] - clip(g[1]) * alpha]);
            }
            e.next_sample += e.epochs_per_sample;
        }
    }
}

/// Optimizes a 2D layout of the fuzzy graph and rescales it to `cfg.aspect`.
pub fn optimize(fg: &FuzzyGraph, cfg: &LayoutConfig) -> Result<Embedding2D> {
    cfg.validate()?;
    if fg.n < 3 {
        return Err(VistaError::invalid(format!(
            "layout needs at least 3 points, got {}",
            fg.n
        )));
    }
    let (a, b) = fit_ab(cfg.min_dist, cfg.spread)?;
    let init = initial_coords(fg, cfg);

    let max_w = fg.edges.iter().map(|e| e.weight).fold(0.0, f64::max);
    let mut schedule: Vec<Schedule> = Vec::with_capacity(2 * fg.edges.len());
    for e in &fg.edges {
        // edges too weak to be sampled even once are dropped
        if e.weight < max_w / cfg.epochs as f64 {
            continue;
        }
        let eps = max_w / e.weight;
        for (head, tail) in [(e.i, e.j), (e.j, e.i)] {
            schedule.push(Schedule {
                head,
                tail,
                epochs_per_sample: eps,
                next_sample: eps - 1.0,
            });
        }
    }
    let sgd = Sgd {
        a,
        b,
        negatives: cfg.negative_sample_rate,
        n: fg.n,
    };

    let coords = if cfg.parallel {
        let store = AtomicCoords(
            init.iter()
                .flat_map(|p| [AtomicU64::new(p[0].to_bits()), AtomicU64::new(p[1].to_bits())])
                .collect(),
        );
        let chunk = (schedule.len() / (4 * rayon::current_num_threads())).max(256);
        for epoch in 0..cfg.epochs {
            let alpha = cfg.learning_rate * (1.0 - epoch as f64 / cfg.epochs as f64);
            schedule.par_chunks_mut(chunk).enumerate().for_each(|(c, edges)| {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(cfg.seed ^ ((epoch as u64) << 32) ^ (c as u64).wrapping_mul(0x9E37_79B9));
                sgd.run_edges(&store, edges, epoch, alpha, &mut rng);
            });
            check_finite((0..fg.n).map(|i| store.get(i)), epoch)?;
        }
        (0..fg.n).map(|i| store.get(i)).collect::<Vec<_>>()
    } else {
        let cells: Vec<Cell<[f64; 2]>> = init.into_iter().map(Cell::new).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        for epoch in 0..cfg.epochs {
            let alpha = cfg.learning_rate * (1.0 - epoch as f64 / cfg.epochs as f64);
            sgd.run_edges(cells.as_slice(), &mut schedule, epoch, alpha, &mut rng);
            check_finite(cells.iter().map(Cell::get), epoch)?;
        }
        cells.into_iter().map(Cell::into_inner).collect()
    };
    Embedding2D::fit_to_aspect(&coords, cfg.aspect)
}

fn check_finite(mut coords: impl Iterator<Item = [f64; 2]>, epoch: usize) -> Result<()> {
    match coords.find(|p| !(p[0].is_finite() && p[1].is_finite())) {
        Some(p) => Err(VistaError::Diverged(format!(
            "non-finite coordinate {p:?} after epoch {epoch}"
        ))),
        None => Ok(()),
    }
}

/// kNN graph, fuzzy graph and optimized embedding for a distance source.
pub fn embed<D: Distances + ?Sized>(dist: &D, cfg: &LayoutConfig) -> Result<(KnnGraph, FuzzyGraph, Embedding2D)> {
    cfg.validate()?;
    let n = dist.len();
    if n < 3 {
        return Err(VistaError::invalid(format!("layout needs at least 3 points, got {n}")));
    }
    let knn = knn_exact(dist, cfg.n_neighbors.min(n - 1))?;
    let fg = fuzzy_simplicial_set(&knn);
    let emb = optimize(&fg, cfg)?;
    Ok((knn, fg, emb))
}

/// Mutual-kNN gain of the 2D layout against the slice distances.
pub fn layout_fidelity<D: Distances + ?Sized>(
    slice_distances: &D,
    emb: &Embedding2D,
    k_fractions: &[f64],
) -> Result<GainCurve> {
    if slice_distances.len() != emb.len() {
        return Err(VistaError::SizeMismatch(format!(
            "{} slice items vs {} embedded points",
            slice_distances.len(),
            emb.len()
        )));
    }
    gain_curve(slice_distances, &EuclideanPoints(&emb.coords), k_fractions)
}
