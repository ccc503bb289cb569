//! Map structure derived from a 2D embedding: density field, dense-area
//! clusters with outlines, inter-cluster connections, tiles and the
//! per-step render plan.

use std::collections::{BTreeMap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VistaError};
use crate::layout::{Bounds, Embedding2D};
use crate::metric::Distances;
use crate::neighbors::KnnGraph;

/// Kernel support in bandwidths along each axis; cells farther away from
/// every point stay exactly zero.
pub const KERNEL_SUPPORT: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CartographyConfig {
    pub grid_w: usize,
    /// Kernel bandwidth in map units; defaults to 2% of the bounds diagonal.
    pub bandwidth: Option<f64>,
    pub quantile: f64,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub min_points: usize,
}

impl Default for CartographyConfig {
    fn default() -> Self {
        Self {
            grid_w: 256,
            bandwidth: None,
            quantile: 0.6,
            tiles_x: 16,
            tiles_y: 9,
            min_points: 4,
        }
    }
}

impl CartographyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_w < 8 {
            return Err(VistaError::invalid("grid_w must be >= 8"));
        }
        if let Some(b) = self.bandwidth {
            if !(b.is_finite() && b > 0.0) {
                return Err(VistaError::invalid("bandwidth must be positive"));
            }
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(VistaError::invalid("quantile must lie in (0, 1)"));
        }
        if self.tiles_x == 0 || self.tiles_y == 0 {
            return Err(VistaError::invalid("tile counts must be >= 1"));
        }
        if self.min_points == 0 {
            return Err(VistaError::invalid("min_points must be >= 1"));
        }
        Ok(())
    }

    pub fn bandwidth_for(&self, bounds: &Bounds) -> f64 {
        self.bandwidth
            .unwrap_or_else(|| 0.02 * bounds.width().hypot(bounds.height()))
    }
}

/// Gaussian KDE sampled at cell centers, row-major with y growing downward.
/// The kernel is cut off at [`KERNEL_SUPPORT`] bandwidths per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityField {
    pub grid_w: usize,
    pub grid_h: usize,
    pub values: Vec<f64>,
    pub bounds: Bounds,
    pub bandwidth: f64,
}

impl DensityField {
    pub fn get(&self, gx: usize, gy: usize) -> f64 {
        self.values[gy * self.grid_w + gx]
    }

    pub fn cell_size(&self) -> (f64, f64) {
        (
            self.bounds.width() / self.grid_w as f64,
            self.bounds.height() / self.grid_h as f64,
        )
    }

    pub fn cell_center(&self, gx: usize, gy: usize) -> [f64; 2] {
        let (cw, ch) = self.cell_size();
        [
            self.bounds.min_x + (gx as f64 + 0.5) * cw,
            self.bounds.min_y + (gy as f64 + 0.5) * ch,
        ]
    }

    /// Cell containing a point; the max edges belong to the last row/column.
    pub fn cell_of(&self, p: [f64; 2]) -> (usize, usize) {
        (
            bin(p[0], self.bounds.min_x, self.bounds.width(), self.grid_w),
            bin(p[1], self.bounds.min_y, self.bounds.height(), self.grid_h),
        )
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

fn bin(v: f64, lo: f64, span: f64, count: usize) -> usize {
    let t = ((v - lo) * count as f64 / span).floor();
    if t <= 0.0 {
        0
    } else {
        (t as usize).min(count - 1)
    }
}

pub fn estimate_density(emb: &Embedding2D, grid_w: usize, bandwidth: f64) -> Result<DensityField> {
    if grid_w < 8 {
        return Err(VistaError::invalid("grid_w must be >= 8"));
    }
    if !(bandwidth.is_finite() && bandwidth > 0.0) {
        return Err(VistaError::invalid("bandwidth must be positive"));
    }
    let bounds = emb.bounds;
    let spread = Bounds::of_points(&emb.coords);
    let collapsed = spread.is_none_or(|s| s.width() == 0.0 && s.height() == 0.0);
    if !(bounds.width() > 0.0 && bounds.height() > 0.0) || collapsed {
        return Err(VistaError::DegenerateBounds(format!(
            "{} points in {bounds:?}",
            emb.len()
        )));
    }
    let grid_h = ((grid_w as f64 * bounds.height() / bounds.width()).round() as usize).max(1);
    let mut field = DensityField {
        grid_w,
        grid_h,
        values: vec![0.0; grid_w * grid_h],
        bounds,
        bandwidth,
    };
    // the truncated kernel factorizes per axis
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let reach = KERNEL_SUPPORT * bandwidth;
    let weight = |d: f64| if d.abs() > reach { 0.0 } else { (-d * d * inv).exp() };
    let (cw, ch) = field.cell_size();
    let wx: Vec<Vec<f64>> = emb
        .coords
        .iter()
        .map(|p| {
            (0..grid_w)
                .map(|gx| weight(bounds.min_x + (gx as f64 + 0.5) * cw - p[0]))
                .collect()
        })
        .collect();
    let wy: Vec<Vec<f64>> = emb
        .coords
        .iter()
        .map(|p| {
            (0..grid_h)
                .map(|gy| weight(bounds.min_y + (gy as f64 + 0.5) * ch - p[1]))
                .collect()
        })
        .collect();
    field.values.par_chunks_mut(grid_w).enumerate().for_each(|(gy, row)| {
        for (ex, ey) in wx.iter().zip(&wy) {
            let fy = ey[gy];
            if fy == 0.0 {
                continue;
            }
            row.iter_mut().zip(ex).for_each(|(v, fx)| *v += fy * fx);
        }
    });
    Ok(field)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: usize,
    /// Row-major cell indices, ascending.
    pub cells: Vec<usize>,
    pub members: Vec<usize>,
    pub medoid: usize,
    /// Closed rings in map units (first point repeated last); ring 0 is
    /// the exterior, any further rings are holes.
    pub outline: Vec<Vec<[f64; 2]>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    pub threshold: f64,
    pub clusters: Vec<Cluster>,
    /// Cluster id of every item.
    pub assignment: Vec<usize>,
}

impl ClusterSet {
    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }
}

/// Nearest-rank quantile of the positive cell values.
pub fn density_threshold(field: &DensityField, quantile: f64) -> Result<f64> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(VistaError::invalid("quantile must lie in (0, 1)"));
    }
    let mut positive: Vec<f64> = field.values.iter().copied().filter(|&v| v > 0.0).collect();
    if positive.is_empty() {
        return Err(VistaError::NoDenseRegion { threshold: 0.0 });
    }
    positive.sort_by(f64::total_cmp);
    let rank = ((quantile * positive.len() as f64).ceil() as usize).clamp(1, positive.len());
    Ok(positive[rank - 1])
}

/// 4-connected components of the cells strictly above `threshold`, in
/// row-major order of their first cell.
pub fn dense_components(field: &DensityField, threshold: f64) -> Vec<Vec<usize>> {
    let (w, h) = (field.grid_w, field.grid_h);
    let mut label = vec![usize::MAX; w * h];
    let mut comps = Vec::new();
    for start in 0..w * h {
        if label[start] != usize::MAX || field.values[start] <= threshold {
            continue;
        }
        let id = comps.len();
        let mut cells = vec![start];
        label[start] = id;
        let mut queue = VecDeque::from([start]);
        while let Some(c) = queue.pop_front() {
            let (x, y) = (c % w, c / w);
            let mut visit = |nx: usize, ny: usize| {
                let nc = ny * w + nx;
                if label[nc] == usize::MAX && field.values[nc] > threshold {
                    label[nc] = id;
                    cells.push(nc);
                    queue.push_back(nc);
                }
            };
            if x > 0 {
                visit(x - 1, y);
            }
            if x + 1 < w {
                visit(x + 1, y);
            }
            if y > 0 {
                visit(x, y - 1);
            }
            if y + 1 < h {
                visit(x, y + 1);
            }
        }
        cells.sort_unstable();
        comps.push(cells);
    }
    comps
}

/// Boundary rings of a cell set, in grid vertex coordinates. Edges run
/// clockwise on screen (region on the right); at pinch vertices the walk
/// turns right so diagonal contacts split into separate rings.
pub fn trace_rings(cells: &[usize], grid_w: usize, grid_h: usize) -> Vec<Vec<(i64, i64)>> {
    let inside = |x: i64, y: i64| {
        x >= 0
            && y >= 0
            && (x as usize) < grid_w
            && (y as usize) < grid_h
            && cells.binary_search(&(y as usize * grid_w + x as usize)).is_ok()
    };
    type V = (i64, i64);
    let mut out_edges: BTreeMap<V, Vec<V>> = BTreeMap::new();
    let mut push = |a: V, b: V| out_edges.entry(a).or_default().push(b);
    for &c in cells {
        let (x, y) = ((c % grid_w) as i64, (c / grid_w) as i64);
        if !inside(x, y - 1) {
            push((x, y), (x + 1, y));
        }
        if !inside(x + 1, y) {
            push((x + 1, y), (x + 1, y + 1));
        }
        if !inside(x, y + 1) {
            push((x + 1, y + 1), (x, y + 1));
        }
        if !inside(x - 1, y) {
            push((x, y + 1), (x, y));
        }
    }

    let mut rings = Vec::new();
    // BTreeMap order starts at the top-left vertex, whose outgoing edge
    // lies on the exterior boundary
    while let Some((&start, _)) = out_edges.iter().find(|(_, v)| !v.is_empty()) {
        let first = out_edges.get_mut(&start).unwrap().remove(0);
        let mut ring = vec![start];
        let (mut prev, mut cur) = (start, first);
        while cur != start {
            ring.push(cur);
            let dir = (cur.0 - prev.0, cur.1 - prev.1);
            let outs = out_edges.get_mut(&cur).expect("boundary edges form closed loops");
            // screen coordinates: right turn of (dx, dy) is (-dy, dx)
            let pick = [(-dir.1, dir.0), dir, (dir.1, -dir.0)]
                .iter()
                .find_map(|d| outs.iter().position(|n| (n.0 - cur.0, n.1 - cur.1) == *d))
                .expect("boundary edges form closed loops");
            let next = outs.remove(pick);
            prev = cur;
            cur = next;
        }
        rings.push(simplify_ring(ring));
    }
    rings
}

fn simplify_ring(ring: Vec<(i64, i64)>) -> Vec<(i64, i64)> {
    let n = ring.len();
    let mut out: Vec<(i64, i64)> = (0..n)
        .filter(|&i| {
            let (a, b, c) = (ring[(i + n - 1) % n], ring[i], ring[(i + 1) % n]);
            (b.0 - a.0) * (c.1 - b.1) - (b.1 - a.1) * (c.0 - b.0) != 0
        })
        .map(|i| ring[i])
        .collect();
    out.push(out[0]);
    out
}

/// Signed shoelace area; positive for the clockwise-on-screen exterior.
pub fn ring_area(ring: &[[f64; 2]]) -> f64 {
    ring.windows(2)
        .map(|w| w[0][0] * w[1][1] - w[1][0] * w[0][1])
        .sum::<f64>()
        / 2.0
}

/// Index of the member minimizing summed distance to the others; ties go
/// to the smallest index.
pub fn medoid<D: Distances + ?Sized>(members: &[usize], dist: &D) -> Option<usize> {
    members
        .par_iter()
        .map(|&i| (members.iter().map(|&j| dist.distance(i, j)).sum::<f64>(), i))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, i)| i)
}

fn rect_distance(p: [f64; 2], lo: [f64; 2], hi: [f64; 2]) -> f64 {
    let dx = (lo[0] - p[0]).max(0.0).max(p[0] - hi[0]);
    let dy = (lo[1] - p[1]).max(0.0).max(p[1] - hi[1]);
    dx.hypot(dy)
}

/// Dense-area clusters. Points outside every dense region join the cluster
/// whose region is nearest; regions that end up with no member are dropped.
pub fn extract_clusters<D: Distances + ?Sized>(
    field: &DensityField,
    emb: &Embedding2D,
    quantile: f64,
    dist: &D,
) -> Result<ClusterSet> {
    if dist.len() != emb.len() {
        return Err(VistaError::SizeMismatch(format!(
            "{} distance items vs {} embedded points",
            dist.len(),
            emb.len()
        )));
    }
    let threshold = density_threshold(field, quantile)?;
    let comps = dense_components(field, threshold);
    if comps.is_empty() {
        return Err(VistaError::NoDenseRegion { threshold });
    }
    let mut cell_comp = vec![usize::MAX; field.values.len()];
    for (id, cells) in comps.iter().enumerate() {
        for &c in cells {
            cell_comp[c] = id;
        }
    }
    let (cw, ch) = field.cell_size();
    let cell_rect = |c: usize| {
        let lo = [
            field.bounds.min_x + (c % field.grid_w) as f64 * cw,
            field.bounds.min_y + (c / field.grid_w) as f64 * ch,
        ];
        (lo, [lo[0] + cw, lo[1] + ch])
    };
    let raw_assign: Vec<usize> = emb
        .coords
        .par_iter()
        .map(|&p| {
            let (gx, gy) = field.cell_of(p);
            let own = cell_comp[gy * field.grid_w + gx];
            if own != usize::MAX {
                return own;
            }
            let mut best = (f64::INFINITY, 0);
            for (id, cells) in comps.iter().enumerate() {
                for &c in cells {
                    let (lo, hi) = cell_rect(c);
                    let d = rect_distance(p, lo, hi);
                    if d < best.0 {
                        best = (d, id);
                    }
                }
            }
            best.1
        })
        .collect();

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); comps.len()];
    for (item, &c) in raw_assign.iter().enumerate() {
        members[c].push(item);
    }
    let mut renumber = vec![usize::MAX; comps.len()];
    let mut clusters = Vec::new();
    for (old, (cells, m)) in comps.into_iter().zip(members).enumerate() {
        if m.is_empty() {
            continue;
        }
        let id = clusters.len();
        renumber[old] = id;
        let outline = trace_rings(&cells, field.grid_w, field.grid_h)
            .into_iter()
            .map(|ring| {
                ring.into_iter()
                    .map(|(x, y)| [field.bounds.min_x + x as f64 * cw, field.bounds.min_y + y as f64 * ch])
                    .collect()
            })
            .collect();
        let medoid = medoid(&m, dist).expect("non-empty members");
        clusters.push(Cluster {
            id,
            cells,
            members: m,
            medoid,
            outline,
        });
    }
    let assignment = raw_assign.into_iter().map(|c| renumber[c]).collect();
    Ok(ClusterSet {
        threshold,
        clusters,
        assignment,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterEdge {
    pub a: usize,
    pub b: usize,
    pub strength: f64,
}

/// Directed kNN edges between each cluster pair over the smaller cluster
/// size, strongest first.
pub fn cluster_connections(cs: &ClusterSet, g: &KnnGraph) -> Result<Vec<ClusterEdge>> {
    if g.n() != cs.assignment.len() {
        return Err(VistaError::SizeMismatch(format!(
            "graph over {} items, clusters over {}",
            g.n(),
            cs.assignment.len()
        )));
    }
    let mut counts: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for (i, j, _) in g.edges() {
        let (ca, cb) = (cs.assignment[i], cs.assignment[j]);
        if ca != cb {
            *counts.entry((ca.min(cb), ca.max(cb))).or_default() += 1;
        }
    }
    let mut edges: Vec<ClusterEdge> = counts
        .into_iter()
        .map(|((a, b), c)| {
            let size = cs.clusters[a].members.len().min(cs.clusters[b].members.len());
            ClusterEdge {
                a,
                b,
                strength: c as f64 / size as f64,
            }
        })
        .collect();
    edges.sort_by(|x, y| y.strength.total_cmp(&x.strength).then((x.a, x.b).cmp(&(y.a, y.b))));
    Ok(edges)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileGrid {
    pub bounds: Bounds,
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Item indices per tile, row-major (`ty * tiles_x + tx`).
    pub tiles: Vec<Vec<usize>>,
}

impl TileGrid {
    pub fn items(&self, tx: usize, ty: usize) -> &[usize] {
        &self.tiles[ty * self.tiles_x + tx]
    }
}

pub fn assign_items(emb: &Embedding2D, tiles_x: usize, tiles_y: usize) -> Result<TileGrid> {
    if tiles_x == 0 || tiles_y == 0 {
        return Err(VistaError::invalid("tile counts must be >= 1"));
    }
    let b = emb.bounds;
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (i, p) in emb.coords.iter().enumerate() {
        let tx = if b.width() > 0.0 {
            bin(p[0], b.min_x, b.width(), tiles_x)
        } else {
            0
        };
        let ty = if b.height() > 0.0 {
            bin(p[1], b.min_y, b.height(), tiles_y)
        } else {
            0
        };
        tiles[ty * tiles_x + tx].push(i);
    }
    Ok(TileGrid {
        bounds: b,
        tiles_x,
        tiles_y,
        tiles,
    })
}

/// Representatives of a region ordered by distance to their medoid. With
/// more than `min_points` items the one with the largest summed distance
/// is dropped first. All remaining items are returned, so the result never
/// has fewer than `min(min_points, items.len())` entries.
pub fn choose_representatives<D: Distances + ?Sized>(
    items: &[usize],
    dist: &D,
    min_points: usize,
) -> Result<Vec<usize>> {
    if items.is_empty() {
        return Err(VistaError::invalid("region has no items"));
    }
    let mut kept = items.to_vec();
    if kept.len() > min_points {
        let totals: Vec<f64> = kept
            .iter()
            .map(|&i| kept.iter().map(|&j| dist.distance(i, j)).sum())
            .collect();
        let worst = (0..kept.len())
            .max_by(|&a, &b| totals[a].total_cmp(&totals[b]).then(b.cmp(&a)))
            .expect("non-empty");
        kept.remove(worst);
    }
    let center = medoid(&kept, dist).expect("non-empty");
    let mut keyed: Vec<(f64, bool, usize)> = kept
        .iter()
        .map(|&i| (dist.distance(center, i), i != center, i))
        .collect();
    keyed.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    Ok(keyed.into_iter().map(|(_, _, i)| i).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderRegion {
    pub id: String,
    pub tile: [usize; 2],
    /// `[x, y, w, h]` in panorama pixels.
    pub bbox: [u32; 4],
    pub representatives: Vec<usize>,
    /// Item index whose text prompts the region at each step.
    pub schedule: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderPlan {
    pub steps: usize,
    pub width: u32,
    pub height: u32,
    pub regions: Vec<RenderRegion>,
}

impl RenderPlan {
    pub fn validate(&self) -> Result<()> {
        for r in &self.regions {
            if r.schedule.len() != self.steps {
                return Err(VistaError::invalid(format!(
                    "region {} schedules {} of {} steps",
                    r.id,
                    r.schedule.len(),
                    self.steps
                )));
            }
            if let Some(s) = r.schedule.iter().find(|s| !r.representatives.contains(s)) {
                return Err(VistaError::invalid(format!(
                    "region {} schedules non-representative item {s}",
                    r.id
                )));
            }
            let [x, y, w, h] = r.bbox;
            if w == 0 || h == 0 || x as u64 + w as u64 > self.width as u64 || y as u64 + h as u64 > self.height as u64 {
                return Err(VistaError::RegionOutOfBounds {
                    region: r.id.clone(),
                    bbox: r.bbox,
                    width: self.width,
                    height: self.height,
                });
            }
        }
        Ok(())
    }
}

/// Round-robin schedule: step `s` uses `reps[s % reps.len()]`.
pub fn round_robin(reps: &[usize], steps: usize) -> Vec<usize> {
    (0..steps).map(|s| reps[s % reps.len()]).collect()
}

/// One region per non-empty tile, with pixel boxes partitioning the
/// panorama proportionally to the tile rectangles.
pub fn build_render_plan(
    grid: &TileGrid,
    reps: &[Vec<usize>],
    steps: usize,
    panorama_px: (u32, u32),
) -> Result<RenderPlan> {
    let (width, height) = panorama_px;
    if width == 0 || height == 0 {
        return Err(VistaError::invalid("panorama has zero size"));
    }
    if steps == 0 {
        return Err(VistaError::invalid("steps must be >= 1"));
    }
    if reps.len() != grid.tiles.len() {
        return Err(VistaError::SizeMismatch(format!(
            "{} representative lists for {} tiles",
            reps.len(),
            grid.tiles.len()
        )));
    }
    if grid.tiles_x > width as usize || grid.tiles_y > height as usize {
        return Err(VistaError::invalid(format!(
            "{}x{} tiles do not fit a {width}x{height} panorama",
            grid.tiles_x, grid.tiles_y
        )));
    }
    let edge = |t: usize, count: usize, px: u32| (t as u64 * px as u64 / count as u64) as u32;
    let mut regions = Vec::new();
    for ty in 0..grid.tiles_y {
        for tx in 0..grid.tiles_x {
            let ix = ty * grid.tiles_x + tx;
            if grid.tiles[ix].is_empty() {
                continue;
            }
            let r = &reps[ix];
            if r.is_empty() {
                return Err(VistaError::invalid(format!(
                    "tile ({tx},{ty}) has items but no representatives"
                )));
            }
            let (x0, x1) = (edge(tx, grid.tiles_x, width), edge(tx + 1, grid.tiles_x, width));
            let (y0, y1) = (edge(ty, grid.tiles_y, height), edge(ty + 1, grid.tiles_y, height));
            regions.push(RenderRegion {
                id: format!("t{tx}_{ty}"),
                tile: [tx, ty],
                bbox: [x0, y0, x1 - x0, y1 - y0],
                representatives: r.clone(),
                schedule: round_robin(r, steps),
            });
        }
    }
    let plan = RenderPlan {
        steps,
        width,
        height,
        regions,
    };
    plan.validate()?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::Aspect;
    use crate::metric::{DistanceMatrix, EuclideanPoints};
    use crate::neighbors::knn_exact;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn framed(coords: Vec<[f64; 2]>, b: [f64; 4]) -> Embedding2D {
        let bounds = Bounds {
            min_x: b[0],
            min_y: b[1],
            max_x: b[2],
            max_y: b[3],
        };
        Embedding2D::new(
            coords,
            bounds,
            Aspect {
                width: b[2] - b[0],
                height: b[3] - b[1],
            },
        )
        .unwrap()
    }

    fn argmax(f: &DensityField) -> (usize, usize) {
        let i = (0..f.values.len())
            .max_by(|&a, &b| f.values[a].total_cmp(&f.values[b]))
            .unwrap();
        (i % f.grid_w, i / f.grid_w)
    }

    #[test]
    fn single_point_peak() {
        let emb = framed(vec![[3.3, 7.1]], [0.0, 0.0, 16.0, 9.0]);
        let f = estimate_density(&emb, 64, 0.5);
        // one point alone collapses the spread
        assert!(matches!(f, Err(VistaError::DegenerateBounds(_))));
        let emb = framed(vec![[3.3, 7.1], [3.3, 7.1 + 1e-9]], [0.0, 0.0, 16.0, 9.0]);
        let f = estimate_density(&emb, 64, 0.5).unwrap();
        assert_eq!(f.grid_h, 36);
        assert_eq!(argmax(&f), f.cell_of([3.3, 7.1]));
    }

    #[test]
    fn two_points_two_maxima() {
        let emb = framed(vec![[2.0, 4.5], [14.0, 4.5]], [0.0, 0.0, 16.0, 9.0]);
        let f = estimate_density(&emb, 64, 0.6).unwrap();
        let row = f.cell_of([0.0, 4.5]).1;
        let vals: Vec<f64> = (0..f.grid_w).map(|x| f.get(x, row)).collect();
        let peaks = (1..vals.len() - 1)
            .filter(|&i| vals[i] > vals[i - 1] && vals[i] >= vals[i + 1])
            .count();
        assert_eq!(peaks, 2);
    }

    #[test]
    fn total_mass_matches_gaussian_integral() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = 0.5;
        let pts: Vec<[f64; 2]> = (0..50)
            .map(|_| [rng.random_range(2.0..8.0), rng.random_range(2.0..8.0)])
            .collect();
        let emb = framed(pts, [0.0, 0.0, 10.0, 10.0]);
        let f = estimate_density(&emb, 100, h).unwrap();
        let (cw, ch) = f.cell_size();
        let mass: f64 = f.values.iter().sum::<f64>() * cw * ch;
        let expect = 50.0 * 2.0 * std::f64::consts::PI * h * h;
        assert!((mass / expect - 1.0).abs() < 0.05, "{mass} vs {expect}");
    }

    #[test]
    fn density_rejects_bad_params() {
        let emb = framed(vec![[1.0, 1.0], [2.0, 2.0]], [0.0, 0.0, 4.0, 4.0]);
        assert!(estimate_density(&emb, 4, 1.0).is_err());
        assert!(estimate_density(&emb, 16, 0.0).is_err());
    }

    fn blobs(centers: &[[f64; 2]], per: usize, sd: f64, seed: u64) -> (Vec<[f64; 2]>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sd).unwrap();
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for (l, c) in centers.iter().enumerate() {
            for _ in 0..per {
                pts.push([c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]);
                labels.push(l);
            }
        }
        (pts, labels)
    }

    #[test]
    fn two_blobs_two_clusters() {
        let (pts, labels) = blobs(&[[4.0, 5.0], [12.0, 5.0]], 200, 0.8, 3);
        let emb = Embedding2D::fit_to_aspect(&pts, Aspect::default()).unwrap();
        let f = estimate_density(&emb, 128, 0.04 * emb.bounds.width().hypot(emb.bounds.height())).unwrap();
        let d = EuclideanPoints(&emb.coords);
        let cs = extract_clusters(&f, &emb, 0.6, &d).unwrap();
        assert_eq!(cs.len(), 2);
        for blob in 0..2 {
            let best = cs
                .clusters
                .iter()
                .map(|c| c.members.iter().filter(|&&m| labels[m] == blob).count())
                .max()
                .unwrap();
            assert!(best as f64 >= 0.95 * 200.0);
        }
    }

    #[test]
    fn single_blob_single_cluster() {
        let (pts, _) = blobs(&[[5.0, 5.0]], 300, 1.0, 4);
        let emb = Embedding2D::fit_to_aspect(&pts, Aspect::default()).unwrap();
        let f = estimate_density(&emb, 96, 0.05 * emb.bounds.width().hypot(emb.bounds.height())).unwrap();
        let cs = extract_clusters(&f, &emb, 0.6, &EuclideanPoints(&emb.coords)).unwrap();
        assert_eq!(cs.len(), 1);
        assert_eq!(cs.clusters[0].members.len(), 300);
        assert!(cs.clusters[0].members.contains(&cs.clusters[0].medoid));
    }

    #[test]
    fn quantile_limit_has_no_dense_region() {
        let (pts, _) = blobs(&[[5.0, 5.0]], 50, 1.0, 5);
        let emb = Embedding2D::fit_to_aspect(&pts, Aspect::default()).unwrap();
        let f = estimate_density(&emb, 64, 4.0).unwrap();
        let r = extract_clusters(&f, &emb, 1.0 - 1e-12, &EuclideanPoints(&emb.coords));
        assert!(matches!(r, Err(VistaError::NoDenseRegion { .. })));
        assert!(extract_clusters(&f, &emb, 1.0, &EuclideanPoints(&emb.coords)).is_err());
    }

    fn cells_of(mask: &[&str]) -> (Vec<usize>, usize, usize) {
        let w = mask[0].len();
        let cells = mask
            .iter()
            .enumerate()
            .flat_map(|(y, row)| {
                row.chars()
                    .enumerate()
                    .filter(|c| c.1 == '#')
                    .map(move |(x, _)| y * w + x)
            })
            .collect();
        (cells, w, mask.len())
    }

    fn area(ring: &[(i64, i64)]) -> f64 {
        let r: Vec<[f64; 2]> = ring.iter().map(|&(x, y)| [x as f64, y as f64]).collect();
        ring_area(&r)
    }

    #[test]
    fn single_cell_ring() {
        let rings = trace_rings(&[0], 1, 1);
        assert_eq!(rings, vec![vec![(0, 0), (1, 0), (1, 1), (0, 1), (0, 0)]]);
    }

    #[test]
    fn ring_areas_count_cells() {
        for mask in [
            vec!["##.", ".##", "..#"],
            vec!["###", "#.#", "###"],
            vec!["#####", "#...#", "#.#.#", "#...#", "#####"],
            vec!["##..", "##..", "..##", "..##"],
        ] {
            let (cells, w, h) = cells_of(&mask);
            let rings = trace_rings(&cells, w, h);
            let total: f64 = rings.iter().map(|r| area(r)).sum();
            assert_eq!(total, cells.len() as f64, "{mask:?}");
            assert!(area(&rings[0]) > 0.0);
            assert!(rings.iter().all(|r| r.first() == r.last()));
        }
        let (cells, w, h) = cells_of(&["###", "#.#", "###"]);
        let rings = trace_rings(&cells, w, h);
        assert_eq!(rings.len(), 2);
        assert_eq!(area(&rings[1]), -1.0);
    }

    fn two_cluster_set(m: usize) -> ClusterSet {
        let mk = |id: usize, members: Vec<usize>| Cluster {
            id,
            cells: vec![id],
            medoid: members[0],
            members,
            outline: vec![],
        };
        ClusterSet {
            threshold: 0.0,
            clusters: vec![mk(0, (0..m).collect()), mk(1, (m..2 * m).collect())],
            assignment: (0..2 * m).map(|i| i / m).collect(),
        }
    }

    #[test]
    fn connections_without_cross_edges() {
        let pts: Vec<[f64; 2]> = (0..10)
            .map(|i| [if i < 5 { i as f64 } else { 100.0 + i as f64 }, 0.0])
            .collect();
        let g = knn_exact(&EuclideanPoints(&pts), 2).unwrap();
        assert!(cluster_connections(&two_cluster_set(5), &g).unwrap().is_empty());
        let mut single = two_cluster_set(5);
        single.clusters.truncate(1);
        single.clusters[0].members = (0..10).collect();
        single.assignment = vec![0; 10];
        assert!(cluster_connections(&single, &g).unwrap().is_empty());
    }

    #[test]
    fn nearest_neighbor_across_pair() {
        // A at even x, B at odd x + tiny offset: each A's nearest is in B
        let m = 6;
        let mut pts = Vec::new();
        for i in 0..m {
            pts.push([10.0 * i as f64, 0.0]);
        }
        for i in 0..m {
            pts.push([10.0 * i as f64 + 0.1, 0.0]);
        }
        let g = knn_exact(&EuclideanPoints(&pts), 1).unwrap();
        let e = cluster_connections(&two_cluster_set(m), &g).unwrap();
        assert_eq!(e.len(), 1);
        assert!(e[0].strength >= 1.0);
        assert_eq!((e[0].a, e[0].b), (0, 1));
    }

    #[test]
    fn tile_boundaries() {
        let emb = framed(
            vec![[0.0, 0.0], [5.0, 5.0], [10.0, 10.0], [4.999, 5.0]],
            [0.0, 0.0, 10.0, 10.0],
        );
        let g = assign_items(&emb, 2, 2).unwrap();
        assert_eq!(g.items(0, 0), &[0]);
        assert_eq!(g.items(1, 1), &[1, 2]);
        assert_eq!(g.items(0, 1), &[3]);
        assert_eq!(g.tiles.iter().map(Vec::len).sum::<usize>(), 4);
    }

    #[test]
    fn representatives_examples() {
        let pts: Vec<[f64; 2]> = (0..10)
            .map(|i| if i == 7 { [50.0, 50.0] } else { [i as f64 * 0.1, 0.0] })
            .collect();
        let d = EuclideanPoints(&pts);
        let items: Vec<usize> = (0..10).collect();
        let reps = choose_representatives(&items, &d, 4).unwrap();
        assert_eq!(reps.len(), 9);
        assert!(!reps.contains(&7));
        assert_eq!(choose_representatives(&[0, 1, 2], &d, 4).unwrap().len(), 3);
        assert_eq!(choose_representatives(&[5], &d, 4).unwrap(), vec![5]);
        // exactly min_points items: nothing dropped
        assert_eq!(choose_representatives(&[0, 1, 2, 7], &d, 4).unwrap().len(), 4);
        assert!(choose_representatives(&[], &d, 4).is_err());
    }

    #[test]
    fn round_robin_examples() {
        let s = round_robin(&[1, 2, 3, 4], 100);
        for r in [1, 2, 3, 4] {
            assert_eq!(s.iter().filter(|&&x| x == r).count(), 25);
        }
        assert!(round_robin(&[9], 100).iter().all(|&x| x == 9));
    }

    #[test]
    fn round_robin_usage_is_balanced() {
        for r in 1..=16usize {
            let reps: Vec<usize> = (100..100 + r).collect();
            for steps in 1..=200 {
                let s = round_robin(&reps, steps);
                let counts: Vec<usize> = reps.iter().map(|x| s.iter().filter(|&y| y == x).count()).collect();
                let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
                assert!(hi - lo <= 1);
                assert_eq!(counts.iter().filter(|&&c| c > 0).count(), r.min(steps));
            }
        }
    }

    #[test]
    fn render_plan_partitions_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pts: Vec<[f64; 2]> = (0..500)
            .map(|_| [rng.random_range(0.0..16.0), rng.random_range(0.0..9.0)])
            .collect();
        let emb = framed(pts, [0.0, 0.0, 16.0, 9.0]);
        let grid = assign_items(&emb, 7, 5).unwrap();
        let reps: Vec<Vec<usize>> = grid.tiles.iter().map(|t| t.iter().take(4).copied().collect()).collect();
        let plan = build_render_plan(&grid, &reps, 10, (1001, 563)).unwrap();
        assert_eq!(plan.regions.len(), 35);
        let area: u64 = plan.regions.iter().map(|r| r.bbox[2] as u64 * r.bbox[3] as u64).sum();
        assert_eq!(area, 1001 * 563);
        assert_eq!(plan.regions[8].id, "t1_1");
        assert!(build_render_plan(&grid, &reps, 10, (0, 100)).is_err());
        assert!(build_render_plan(&grid, &reps, 0, (100, 100)).is_err());
    }

    #[test]
    fn empty_tiles_have_no_region() {
        let emb = framed(vec![[0.5, 0.5], [0.6, 0.4]], [0.0, 0.0, 4.0, 4.0]);
        let grid = assign_items(&emb, 2, 2).unwrap();
        let reps: Vec<Vec<usize>> = grid.tiles.clone();
        let plan = build_render_plan(&grid, &reps, 3, (64, 64)).unwrap();
        assert_eq!(plan.regions.len(), 1);
        assert_eq!(plan.regions[0].bbox, [0, 0, 32, 32]);
    }

    proptest! {
        #[test]
        fn adding_a_point_never_lowers_density(seed in 0u64..200, x in 0.0f64..10.0, y in 0.0f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pts: Vec<[f64; 2]> = (0..20).map(|_| [rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)]).collect();
            let before = estimate_density(&framed(pts.clone(), [0.0, 0.0, 10.0, 10.0]), 32, 0.7).unwrap();
            pts.push([x, y]);
            let after = estimate_density(&framed(pts, [0.0, 0.0, 10.0, 10.0]), 32, 0.7).unwrap();
            for (a, b) in after.values.iter().zip(&before.values) {
                prop_assert!(a >= b);
            }
        }

        #[test]
        fn medoid_matches_brute_force(seed in 0u64..500, n in 1usize..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(0.0..3.0), rng.random_range(0.0..3.0)]).collect();
            let dm = DistanceMatrix::euclidean(&pts);
            let members: Vec<usize> = (0..n).collect();
            let mut best = (f64::INFINITY, 0);
            for i in 0..n {
                let s: f64 = (0..n).map(|j| dm.get(i, j)).sum();
                if s < best.0 {
                    best = (s, i);
                }
            }
            prop_assert_eq!(medoid(&members, &dm), Some(best.1));
        }

        #[test]
        fn tiles_partition_items(seed in 0u64..200, tx in 1usize..12, ty in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<[f64; 2]> = (0..100).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(0.0..1.0)]).collect();
            let emb = Embedding2D::fit_to_aspect(&pts, Aspect::default()).unwrap();
            let g = assign_items(&emb, tx, ty).unwrap();
            let mut seen: Vec<usize> = g.tiles.concat();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..100).collect::<Vec<_>>());
            let (tw, th) = (emb.bounds.width() / tx as f64, emb.bounds.height() / ty as f64);
            for (ix, items) in g.tiles.iter().enumerate() {
                let (cx, cy) = ((ix % tx) as f64, (ix / tx) as f64);
                for &i in items {
                    let p = emb.coords[i];
                    prop_assert!(p[0] >= cx * tw - 1e-9 && p[0] <= (cx + 1.0) * tw + 1e-9);
                    prop_assert!(p[1] >= cy * th - 1e-9 && p[1] <= (cy + 1.0) * th + 1e-9);
                }
            }
        }
    }
}
