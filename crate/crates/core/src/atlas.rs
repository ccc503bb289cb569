//! Atlas bundle export (manifest plus tile pyramid) and the staged pipeline.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cartography::{
    assign_items, build_render_plan, choose_representatives, cluster_connections, estimate_density, extract_clusters,
    CartographyConfig, ClusterEdge, ClusterSet, DensityField, RenderPlan, TileGrid,
};
use crate::corpus::{load_corpus, select_top_activating, LatentSlice, Selection};
use crate::error::{Result, VistaError};
use crate::layout::{embed, layout_fidelity, read_embedding_csv, Aspect, Bounds, Embedding2D, LayoutConfig};
use crate::metric::{DistanceMatrix, Distances, MetricConfig, SliceMetric};
use crate::neighbors::{GainCurve, GainPoint, KnnGraph};
use crate::renderer::{
    decode_png, encode_png, load_panorama, render, save_panorama, Panorama, PanoramaConfig, Provenance,
};

pub const SCHEMA: &str = "vista-atlas/1";
pub const TILE_PATH: &str = "tiles/{z}/{x}/{y}.png";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn crop(&self, x: u32, y: u32, w: u32, h: u32) -> RgbImage {
        let mut pixels = Vec::with_capacity(w as usize * h as usize * 3);
        for row in y..y + h {
            let start = 3 * (row as usize * self.width as usize + x as usize);
            pixels.extend_from_slice(&self.pixels[start..start + 3 * w as usize]);
        }
        RgbImage {
            width: w,
            height: h,
            pixels,
        }
    }
}

/// Half-resolution image; each output pixel is the mean of its (up to) 2x2
/// source block, rounded half up.
pub fn downsample(img: &RgbImage) -> RgbImage {
    let (w, h) = (img.width.div_ceil(2), img.height.div_ceil(2));
    let mut pixels = vec![0u8; w as usize * h as usize * 3];
    pixels.par_chunks_mut(3 * w as usize).enumerate().for_each(|(y, row)| {
        let y = y as u32;
        for x in 0..w {
            let mut sum = [0u32; 3];
            let mut count = 0u32;
            for (sx, sy) in [
                (2 * x, 2 * y),
                (2 * x + 1, 2 * y),
                (2 * x, 2 * y + 1),
                (2 * x + 1, 2 * y + 1),
            ] {
                if sx < img.width && sy < img.height {
                    let p = img.pixel(sx, sy);
                    (0..3).for_each(|c| sum[c] += p[c] as u32);
                    count += 1;
                }
            }
            for c in 0..3 {
                row[3 * x as usize + c] = ((sum[c] + count / 2) / count) as u8;
            }
        }
    });
    RgbImage {
        width: w,
        height: h,
        pixels,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelMeta {
    pub z: u32,
    pub width: u32,
    pub height: u32,
    pub tiles_x: u32,
    pub tiles_y: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidMeta {
    pub tile_px: u32,
    pub path: String,
    pub levels: Vec<LevelMeta>,
}

/// Level 0 is full resolution; each further level halves it until a single
/// tile covers the image.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    pub tile_px: u32,
    pub levels: Vec<RgbImage>,
    pub provenance: Provenance,
}

impl Pyramid {
    pub fn meta(&self) -> PyramidMeta {
        PyramidMeta {
            tile_px: self.tile_px,
            path: TILE_PATH.into(),
            levels: self
                .levels
                .iter()
                .enumerate()
                .map(|(z, img)| LevelMeta {
                    z: z as u32,
                    width: img.width,
                    height: img.height,
                    tiles_x: img.width.div_ceil(self.tile_px),
                    tiles_y: img.height.div_ceil(self.tile_px),
                })
                .collect(),
        }
    }

    pub fn tile(&self, z: usize, x: u32, y: u32) -> RgbImage {
        let img = &self.levels[z];
        let (x0, y0) = (x * self.tile_px, y * self.tile_px);
        img.crop(
            x0,
            y0,
            self.tile_px.min(img.width - x0),
            self.tile_px.min(img.height - y0),
        )
    }

    /// Writes every tile under `dir` following [`TILE_PATH`].
    pub fn write(&self, dir: &Path) -> Result<()> {
        let jobs: Vec<(usize, u32, u32)> = self
            .meta()
            .levels
            .iter()
            .flat_map(|l| (0..l.tiles_x).flat_map(move |x| (0..l.tiles_y).map(move |y| (l.z as usize, x, y))))
            .collect();
        for l in self.meta().levels {
            for x in 0..l.tiles_x {
                let d = dir.join(format!("tiles/{}/{x}", l.z));
                fs::create_dir_all(&d).map_err(|e| VistaError::io(format!("creating {}", d.display()), e))?;
            }
        }
        jobs.par_iter().try_for_each(|&(z, x, y)| {
            let t = self.tile(z, x, y);
            let bytes = encode_png(t.width, t.height, &t.pixels, None)?;
            let path = dir.join(tile_path(z as u32, x, y));
            fs::write(&path, bytes).map_err(|e| VistaError::io(format!("writing {}", path.display()), e))
        })
    }
}

pub fn tile_path(z: u32, x: u32, y: u32) -> String {
    TILE_PATH
        .replace("{z}", &z.to_string())
        .replace("{x}", &x.to_string())
        .replace("{y}", &y.to_string())
}

pub fn build_tile_pyramid(p: &Panorama, tile_px: u32) -> Result<Pyramid> {
    if tile_px < 64 {
        return Err(VistaError::invalid("tile_px must be >= 64"));
    }
    let mut img = RgbImage {
        width: p.width,
        height: p.height,
        pixels: p.pixels.clone(),
    };
    let mut levels = Vec::new();
    loop {
        let single = img.width <= tile_px && img.height <= tile_px;
        let next = (!single).then(|| downsample(&img));
        levels.push(img);
        match next {
            Some(n) => img = n,
            None => break,
        }
    }
    Ok(Pyramid {
        tile_px,
        levels,
        provenance: p.provenance.clone(),
    })
}

/// Stitches the tiles of level `z` of a written bundle back together.
pub fn assemble_level(bundle: &Path, meta: &PyramidMeta, z: usize) -> Result<RgbImage> {
    let l = meta
        .levels
        .get(z)
        .ok_or_else(|| VistaError::Bundle(format!("no pyramid level {z}")))?;
    let mut out = RgbImage {
        width: l.width,
        height: l.height,
        pixels: vec![0; l.width as usize * l.height as usize * 3],
    };
    for x in 0..l.tiles_x {
        for y in 0..l.tiles_y {
            let t = read_png(&bundle.join(tile_path(z as u32, x, y)))?;
            let (x0, y0) = (x * meta.tile_px, y * meta.tile_px);
            let expect = (meta.tile_px.min(l.width - x0), meta.tile_px.min(l.height - y0));
            if (t.width, t.height) != expect {
                return Err(VistaError::Bundle(format!(
                    "tile {z}/{x}/{y} is {}x{}, expected {}x{}",
                    t.width, t.height, expect.0, expect.1
                )));
            }
            for row in 0..t.height {
                let src = 3 * (row as usize * t.width as usize);
                let dst = 3 * ((y0 + row) as usize * l.width as usize + x0 as usize);
                out.pixels[dst..dst + 3 * t.width as usize].copy_from_slice(&t.pixels[src..src + 3 * t.width as usize]);
            }
        }
    }
    Ok(out)
}

fn read_png(path: &Path) -> Result<RgbImage> {
    let f = File::open(path).map_err(|e| VistaError::io(format!("opening {}", path.display()), e))?;
    let d = decode_png(BufReader::new(f))?;
    Ok(RgbImage {
        width: d.width,
        height: d.height,
        pixels: d.rgb,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub id: String,
    pub text: String,
    pub x: f64,
    pub y: f64,
    pub norm_activation: f64,
    pub cluster: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestCluster {
    pub id: usize,
    pub size: usize,
    /// Item id of the medoid.
    pub medoid: String,
    /// GeoJSON polygon coordinates: exterior ring first, then holes.
    pub polygon: Vec<Vec<[f64; 2]>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestGain {
    pub points: Vec<GainPoint>,
    pub argmax_k_fraction: Option<f64>,
    pub max_gain: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestPanorama {
    pub width: u32,
    pub height: u32,
    pub backend: String,
    pub config_hash: String,
}

/// Contents of `atlas.json`. Field order fixes the key order on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema: String,
    pub latent_id: u32,
    pub n: usize,
    pub source_size: usize,
    pub aspect: Aspect,
    pub bounds: Bounds,
    pub items: Vec<ManifestItem>,
    pub clusters: Vec<ManifestCluster>,
    pub connections: Vec<ClusterEdge>,
    pub gain_curve: ManifestGain,
    pub panorama: ManifestPanorama,
    pub pyramid: PyramidMeta,
}

pub struct BundleInputs<'a> {
    pub slice: &'a LatentSlice,
    pub emb: &'a Embedding2D,
    pub clusters: &'a ClusterSet,
    pub connections: &'a [ClusterEdge],
    pub gain_curve: &'a GainCurve,
    pub pyramid: &'a Pyramid,
}

pub fn build_manifest(inp: &BundleInputs) -> Result<Manifest> {
    let n = inp.slice.len();
    if inp.emb.len() != n || inp.clusters.assignment.len() != n || inp.gain_curve.n != n {
        return Err(VistaError::Bundle(format!(
            "inconsistent inputs: slice {n}, embedding {}, clusters {}, gain curve {}",
            inp.emb.len(),
            inp.clusters.assignment.len(),
            inp.gain_curve.n
        )));
    }
    let level0 = inp
        .pyramid
        .levels
        .first()
        .ok_or_else(|| VistaError::Bundle("empty pyramid".into()))?;
    let items = inp
        .slice
        .members
        .iter()
        .zip(&inp.emb.coords)
        .zip(&inp.clusters.assignment)
        .map(|((m, p), &c)| ManifestItem {
            id: m.item.id.clone(),
            text: m.item.text.clone(),
            x: p[0],
            y: p[1],
            norm_activation: m.norm_activation,
            cluster: c,
        })
        .collect();
    let clusters = inp
        .clusters
        .clusters
        .iter()
        .map(|c| ManifestCluster {
            id: c.id,
            size: c.members.len(),
            medoid: inp.slice.members[c.medoid].item.id.clone(),
            polygon: c.outline.clone(),
        })
        .collect();
    let best = inp.gain_curve.argmax();
    Ok(Manifest {
        schema: SCHEMA.into(),
        latent_id: inp.slice.latent_id,
        n,
        source_size: inp.slice.source_size,
        aspect: inp.emb.aspect,
        bounds: inp.emb.bounds,
        items,
        clusters,
        connections: inp.connections.to_vec(),
        gain_curve: ManifestGain {
            points: inp.gain_curve.points.clone(),
            argmax_k_fraction: best.map(|p| p.k_fraction),
            max_gain: best.map(|p| p.gain),
        },
        panorama: ManifestPanorama {
            width: level0.width,
            height: level0.height,
            backend: inp.pyramid.provenance.backend.clone(),
            config_hash: inp.pyramid.provenance.config_hash.clone(),
        },
        pyramid: inp.pyramid.meta(),
    })
}

/// Writes `atlas.json` and the tile pyramid into `out_dir`.
pub fn export_bundle(inp: &BundleInputs, out_dir: &Path) -> Result<PathBuf> {
    let manifest = build_manifest(inp)?;
    fs::create_dir_all(out_dir).map_err(|e| VistaError::io(format!("creating {}", out_dir.display()), e))?;
    let tiles = out_dir.join("tiles");
    if tiles.exists() {
        fs::remove_dir_all(&tiles).map_err(|e| VistaError::io(format!("clearing {}", tiles.display()), e))?;
    }
    inp.pyramid.write(out_dir)?;
    let path = out_dir.join("atlas.json");
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    fs::write(&path, bytes).map_err(|e| VistaError::io(format!("writing {}", path.display()), e))?;
    Ok(out_dir.to_path_buf())
}

/// Checks a written bundle against the schema and its own metadata.
pub fn validate_bundle(dir: &Path) -> Result<Manifest> {
    let m: Manifest = read_json(&dir.join("atlas.json")).map_err(|e| VistaError::Bundle(format!("atlas.json: {e}")))?;
    let fail = |msg: String| Err(VistaError::Bundle(msg));
    if m.schema != SCHEMA {
        return fail(format!("schema {:?}, expected {SCHEMA:?}", m.schema));
    }
    if m.items.len() != m.n {
        return fail(format!("{} items, manifest says {}", m.items.len(), m.n));
    }
    let mut ids: Vec<&str> = m.items.iter().map(|i| i.id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return fail("duplicate item ids".into());
    }
    if let Some(it) = m.items.iter().find(|it| !m.bounds.contains([it.x, it.y])) {
        return fail(format!("item {} at ({}, {}) outside bounds", it.id, it.x, it.y));
    }
    if m.clusters.iter().enumerate().any(|(i, c)| c.id != i) {
        return fail("cluster ids are not 0..len".into());
    }
    if let Some(it) = m.items.iter().find(|it| it.cluster >= m.clusters.len()) {
        return fail(format!("item {} names unknown cluster {}", it.id, it.cluster));
    }
    for c in &m.clusters {
        if ids.binary_search(&c.medoid.as_str()).is_err() {
            return fail(format!("cluster {} medoid {} is not an item", c.id, c.medoid));
        }
        if c.polygon.is_empty() || c.polygon.iter().any(|r| r.len() < 4 || r.first() != r.last()) {
            return fail(format!("cluster {} has a malformed polygon", c.id));
        }
    }
    for e in &m.connections {
        if e.a == e.b || e.a.max(e.b) >= m.clusters.len() || e.strength.is_nan() || e.strength <= 0.0 {
            return fail(format!("bad connection {e:?}"));
        }
    }
    let p = &m.pyramid;
    if p.path != TILE_PATH || p.levels.is_empty() {
        return fail("pyramid metadata malformed".into());
    }
    let base = p.levels[0];
    if (base.width, base.height) != (m.panorama.width, m.panorama.height) {
        return fail("pyramid level 0 does not match the panorama".into());
    }
    let expected_levels = 1 + (base.tiles_x.max(base.tiles_y) as f64).log2().ceil() as usize;
    if p.levels.len() != expected_levels {
        return fail(format!("{} pyramid levels, expected {expected_levels}", p.levels.len()));
    }
    for (z, l) in p.levels.iter().enumerate() {
        let scale = 1u32 << z;
        let want = (base.width.div_ceil(scale), base.height.div_ceil(scale));
        if l.z as usize != z || (l.width, l.height) != want {
            return fail(format!(
                "level {z} has size {}x{}, expected {}x{}",
                l.width, l.height, want.0, want.1
            ));
        }
        if (l.tiles_x, l.tiles_y) != (base.tiles_x.div_ceil(scale), base.tiles_y.div_ceil(scale)) {
            return fail(format!("level {z} tile counts {}x{}", l.tiles_x, l.tiles_y));
        }
        for x in 0..l.tiles_x {
            for y in 0..l.tiles_y {
                let path = dir.join(tile_path(z as u32, x, y));
                if !path.is_file() {
                    return fail(format!("missing tile {}", path.display()));
                }
            }
        }
    }
    Ok(m)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| VistaError::io(format!("opening {}", path.display()), e))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| VistaError::io(format!("writing {}", path.display()), e))
}

fn default_fractions() -> Vec<f64> {
    (1..=15).map(|i| i as f64 / 100.0).collect()
}

fn default_tile_px() -> u32 {
    256
}

fn default_selection() -> Selection {
    Selection::Fraction(0.02)
}

/// The whole pipeline as one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: PathBuf,
    pub dim: u32,
    pub latent_id: u32,
    #[serde(default = "default_selection")]
    pub selection: Selection,
    #[serde(default)]
    pub metric: MetricConfig,
    #[serde(default)]
    pub layout: LayoutConfig,
    #[serde(default)]
    pub cartography: CartographyConfig,
    #[serde(default)]
    pub panorama: PanoramaConfig,
    pub out_dir: PathBuf,
    #[serde(default = "default_fractions")]
    pub k_fractions: Vec<f64>,
    #[serde(default = "default_tile_px")]
    pub tile_px: u32,
}

impl PipelineConfig {
    pub fn new(corpus: PathBuf, dim: u32, latent_id: u32, out_dir: PathBuf) -> Self {
        Self {
            corpus,
            dim,
            latent_id,
            selection: default_selection(),
            metric: MetricConfig::default(),
            layout: LayoutConfig::default(),
            cartography: CartographyConfig::default(),
            panorama: PanoramaConfig::default(),
            out_dir,
            k_fractions: default_fractions(),
            tile_px: default_tile_px(),
        }
    }

    /// Reads a config; relative paths resolve against the config's folder.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.corpus.is_relative() {
            cfg.corpus = base.join(&cfg.corpus);
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.layout.seed = seed;
        self.panorama.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_id >= self.dim {
            return Err(VistaError::LatentOutOfRange {
                latent: self.latent_id,
                dim: self.dim,
            });
        }
        self.selection.validate()?;
        self.metric.validate()?;
        self.layout.validate()?;
        self.cartography.validate()?;
        self.panorama.validate()?;
        self.panorama.check_aspect(self.layout.aspect.ratio())?;
        if self.cartography.tiles_x > self.panorama.width_px as usize
            || self.cartography.tiles_y > self.panorama.height_px as usize
        {
            return Err(VistaError::invalid("more map tiles than panorama pixels"));
        }
        if self.tile_px < 64 {
            return Err(VistaError::invalid("tile_px must be >= 64"));
        }
        let f = &self.k_fractions;
        if f.is_empty() || f.iter().any(|&x| !(x > 0.0 && x < 1.0)) || f.windows(2).any(|w| w[0] >= w[1]) {
            return Err(VistaError::invalid(
                "k_fractions must be strictly increasing values in (0, 1)",
            ));
        }
        Ok(())
    }
}

/// File names of the persisted intermediates.
pub mod files {
    pub const SLICE: &str = "slice.json";
    pub const DISTANCES: &str = "distances.bin";
    pub const EMBEDDING: &str = "embedding.csv";
    pub const LAYOUT: &str = "layout.json";
    pub const KNN: &str = "knn.json";
    pub const GAIN: &str = "gain_curve.csv";
    pub const DENSITY: &str = "density.json";
    pub const CLUSTERS: &str = "clusters.json";
    pub const CONNECTIONS: &str = "connections.json";
    pub const TILES: &str = "tiles.json";
    pub const PLAN: &str = "render_plan.json";
    pub const PANORAMA: &str = "panorama.png";
}

#[derive(Serialize, Deserialize)]
struct LayoutMeta {
    aspect: Aspect,
    bounds: Bounds,
}

#[derive(Serialize, Deserialize)]
struct KnnData {
    n: usize,
    k: usize,
    neighbors: Vec<usize>,
    distances: Vec<f64>,
}

fn save_knn(g: &KnnGraph, path: &Path) -> Result<()> {
    let data = KnnData {
        n: g.n(),
        k: g.k(),
        neighbors: (0..g.n()).flat_map(|i| g.neighbors(i).to_vec()).collect(),
        distances: (0..g.n()).flat_map(|i| g.distances(i).to_vec()).collect(),
    };
    write_json(path, &data)
}

fn load_knn(path: &Path) -> Result<KnnGraph> {
    let d: KnnData = read_json(path)?;
    KnnGraph::from_parts(d.n, d.k, d.neighbors, d.distances)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| VistaError::io(format!("creating {}", dir.display()), e))
}

pub fn load_slice(dir: &Path) -> Result<LatentSlice> {
    LatentSlice::load(&dir.join(files::SLICE))
}

/// Embedding persisted by the layout stage, checked against the slice ids.
pub fn load_embedding(dir: &Path, slice: &LatentSlice) -> Result<Embedding2D> {
    let (ids, coords) = read_embedding_csv(&dir.join(files::EMBEDDING))?;
    if ids.len() != slice.len() || ids.iter().zip(&slice.members).any(|(a, m)| *a != m.item.id) {
        return Err(VistaError::SizeMismatch("embedding ids do not match the slice".into()));
    }
    let meta: LayoutMeta = read_json(&dir.join(files::LAYOUT))?;
    Embedding2D::new(coords, meta.bounds, meta.aspect)
}

pub fn load_gain_curve(dir: &Path, n: usize) -> Result<GainCurve> {
    let path = dir.join(files::GAIN);
    let src = fs::read_to_string(&path).map_err(|e| VistaError::io(format!("reading {}", path.display()), e))?;
    GainCurve::from_csv(&src, n)
}

pub fn load_clusters(dir: &Path) -> Result<ClusterSet> {
    read_json(&dir.join(files::CLUSTERS))
}

pub fn load_render_plan(dir: &Path) -> Result<RenderPlan> {
    read_json(&dir.join(files::PLAN))
}

pub fn load_density(dir: &Path) -> Result<DensityField> {
    read_json(&dir.join(files::DENSITY))
}

/// Slice distances: the cache when present and sized right, else computed.
fn slice_distances(dir: &Path, slice: &LatentSlice, metric: &MetricConfig) -> Result<DistanceMatrix> {
    let cache = dir.join(files::DISTANCES);
    if cache.is_file() {
        let m = DistanceMatrix::load(&cache)?;
        if m.len() == slice.len() {
            return Ok(m);
        }
    }
    Ok(DistanceMatrix::from_distances(&SliceMetric::new(slice, metric)?))
}

pub fn stage_select(cfg: &PipelineConfig, corpus: &Path, out: &Path) -> Result<LatentSlice> {
    ensure_dir(out)?;
    let corpus = load_corpus(corpus, cfg.dim)?;
    let slice = select_top_activating(&corpus, cfg.latent_id, cfg.selection)?;
    slice.save(&out.join(files::SLICE))?;
    Ok(slice)
}

/// Distances, kNN graph and 2D embedding of the slice in `input`.
pub fn stage_layout(cfg: &PipelineConfig, input: &Path, out: &Path) -> Result<Embedding2D> {
    ensure_dir(out)?;
    let slice = load_slice(input)?;
    let dist = DistanceMatrix::from_distances(&SliceMetric::new(&slice, &cfg.metric)?);
    dist.save(&out.join(files::DISTANCES))?;
    let (knn, _, emb) = embed(&dist, &cfg.layout)?;
    let ids: Vec<&str> = slice.members.iter().map(|m| m.item.id.as_str()).collect();
    emb.save_csv(&ids, &out.join(files::EMBEDDING))?;
    write_json(
        &out.join(files::LAYOUT),
        &LayoutMeta {
            aspect: emb.aspect,
            bounds: emb.bounds,
        },
    )?;
    save_knn(&knn, &out.join(files::KNN))?;
    if input != out {
        slice.save(&out.join(files::SLICE))?;
    }
    Ok(emb)
}

pub fn stage_fidelity(cfg: &PipelineConfig, input: &Path, out: &Path) -> Result<GainCurve> {
    ensure_dir(out)?;
    let slice = load_slice(input)?;
    let emb = load_embedding(input, &slice)?;
    let dist = slice_distances(input, &slice, &cfg.metric)?;
    let curve = layout_fidelity(&dist, &emb, &cfg.k_fractions)?;
    curve.save_csv(&out.join(files::GAIN))?;
    if let Some(best) = curve.argmax() {
        log::info!(
            "layout fidelity: max gain {:.4} at k = {} ({})",
            best.gain,
            best.k_fraction,
            best.k
        );
    }
    Ok(curve)
}

/// Density, clusters, connections, tiles and the render plan.
pub fn stage_map(cfg: &PipelineConfig, input: &Path, out: &Path) -> Result<RenderPlan> {
    ensure_dir(out)?;
    let c = &cfg.cartography;
    let slice = load_slice(input)?;
    let emb = load_embedding(input, &slice)?;
    let knn = load_knn(&input.join(files::KNN))?;
    let dist = slice_distances(input, &slice, &cfg.metric)?;
    let density = estimate_density(&emb, c.grid_w, c.bandwidth_for(&emb.bounds))?;
    let clusters = extract_clusters(&density, &emb, c.quantile, &dist)?;
    let connections = cluster_connections(&clusters, &knn)?;
    let grid = assign_items(&emb, c.tiles_x, c.tiles_y)?;
    let reps = representatives(&grid, &dist, c.min_points)?;
    let plan = build_render_plan(
        &grid,
        &reps,
        cfg.panorama.steps,
        (cfg.panorama.width_px, cfg.panorama.height_px),
    )?;
    log::info!(
        "map: {} clusters, {} connections, {} render regions",
        clusters.len(),
        connections.len(),
        plan.regions.len()
    );
    write_json(&out.join(files::DENSITY), &density)?;
    write_json(&out.join(files::CLUSTERS), &clusters)?;
    write_json(&out.join(files::CONNECTIONS), &connections)?;
    write_json(&out.join(files::TILES), &grid)?;
    write_json(&out.join(files::PLAN), &plan)?;
    Ok(plan)
}

fn representatives<D: Distances + ?Sized>(grid: &TileGrid, dist: &D, min_points: usize) -> Result<Vec<Vec<usize>>> {
    grid.tiles
        .par_iter()
        .map(|items| {
            if items.is_empty() {
                Ok(Vec::new())
            } else {
                choose_representatives(items, dist, min_points)
            }
        })
        .collect()
}

pub fn stage_render(cfg: &PipelineConfig, input: &Path, out: &Path) -> Result<Panorama> {
    ensure_dir(out)?;
    let slice = load_slice(input)?;
    let plan = load_render_plan(input)?;
    let density = load_density(input)?;
    let pano = render(&plan, &slice, &density, &cfg.panorama)?;
    save_panorama(&pano, &out.join(files::PANORAMA))?;
    Ok(pano)
}

pub fn stage_export(cfg: &PipelineConfig, input: &Path, bundle: &Path) -> Result<PathBuf> {
    let slice = load_slice(input)?;
    let emb = load_embedding(input, &slice)?;
    let clusters = load_clusters(input)?;
    let connections: Vec<ClusterEdge> = read_json(&input.join(files::CONNECTIONS))?;
    let gain = load_gain_curve(input, slice.len())?;
    let pano = load_panorama(&input.join(files::PANORAMA))?;
    let pyramid = build_tile_pyramid(&pano, cfg.tile_px)?;
    export_bundle(
        &BundleInputs {
            slice: &slice,
            emb: &emb,
            clusters: &clusters,
            connections: &connections,
            gain_curve: &gain,
            pyramid: &pyramid,
        },
        bundle,
    )
}

/// Exclusive claim on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub const FILE: &'static str = ".vista.lock";

    pub fn acquire(dir: &Path) -> Result<Self> {
        ensure_dir(dir)?;
        let path = dir.join(Self::FILE);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                let ctx = if e.kind() == std::io::ErrorKind::AlreadyExists {
                    format!(
                        "{} exists; another pipeline is using this output directory",
                        path.display()
                    )
                } else {
                    format!("creating {}", path.display())
                };
                VistaError::io(ctx, e)
            })?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(Self { path })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub bundle: PathBuf,
    pub timings: Vec<(&'static str, Duration)>,
}

fn timed<T>(
    name: &'static str,
    timings: &mut Vec<(&'static str, Duration)>,
    f: impl FnOnce() -> Result<T>,
) -> Result<T> {
    let start = Instant::now();
    let out = f().map_err(|e| VistaError::Stage {
        stage: name,
        source: Box::new(e),
    })?;
    let took = start.elapsed();
    log::info!("stage {name} finished in {took:.2?}");
    timings.push((name, took));
    Ok(out)
}

/// Runs every stage in order. Intermediates go to `out_dir/intermediate`,
/// the bundle to `out_dir`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport> {
    cfg.validate()?;
    let out = cfg.out_dir.as_path();
    let _lock = OutputLock::acquire(out).map_err(|e| VistaError::Stage {
        stage: "lock",
        source: Box::new(e),
    })?;
    let inter = out.join("intermediate");
    let mut t = Vec::new();
    timed("select", &mut t, || stage_select(cfg, &cfg.corpus, &inter))?;
    timed("layout", &mut t, || stage_layout(cfg, &inter, &inter))?;
    timed("fidelity", &mut t, || stage_fidelity(cfg, &inter, &inter))?;
    timed("map", &mut t, || stage_map(cfg, &inter, &inter))?;
    timed("render", &mut t, || stage_render(cfg, &inter, &inter))?;
    let bundle = timed("export", &mut t, || stage_export(cfg, &inter, out))?;
    Ok(RunReport { bundle, timings: t })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(w: u32, h: u32) -> RgbImage {
        RgbImage {
            width: w,
            height: h,
            pixels: (0..w * h * 3).map(|i| (i * 7 % 256) as u8).collect(),
        }
    }

    fn pano(w: u32, h: u32) -> Panorama {
        let i = img(w, h);
        Panorama {
            width: w,
            height: h,
            pixels: i.pixels,
            provenance: Provenance {
                backend: "mock".into(),
                config_hash: "x".into(),
            },
        }
    }

    #[test]
    fn pyramid_arithmetic() {
        let p = build_tile_pyramid(&pano(512, 512), 256).unwrap();
        let m = p.meta();
        assert_eq!(m.levels.len(), 2);
        assert_eq!((m.levels[0].tiles_x, m.levels[0].tiles_y), (2, 2));
        assert_eq!((m.levels[1].tiles_x, m.levels[1].tiles_y), (1, 1));
        assert!(build_tile_pyramid(&pano(64, 64), 32).is_err());
    }

    #[test]
    fn box_filter_half_up() {
        let src = img(5, 3);
        let half = downsample(&src);
        assert_eq!((half.width, half.height), (3, 2));
        for c in 0..3 {
            let sum: u32 = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .iter()
                .map(|&(x, y)| src.pixel(x, y)[c] as u32)
                .sum();
            assert_eq!(half.pixel(0, 0)[c] as u32, (2 * sum + 4) / 8);
        }
        // right edge column averages two source pixels
        let pair = src.pixel(4, 0)[0] as u32 + src.pixel(4, 1)[0] as u32;
        assert_eq!(half.pixel(2, 0)[0] as u32, pair.div_ceil(2));
        assert_eq!(half.pixel(2, 1), src.pixel(4, 2));
    }

    #[test]
    fn level_count_formula() {
        for (w, h, t) in [
            (600u32, 300u32, 64u32),
            (1000, 90, 100),
            (64, 64, 64),
            (4097, 1000, 256),
        ] {
            let p = build_tile_pyramid(&pano(w, h), t).unwrap().meta();
            let base = p.levels[0];
            let expect = 1 + (base.tiles_x.max(base.tiles_y) as f64).log2().ceil() as usize;
            assert_eq!(p.levels.len(), expect, "{w}x{h}/{t}");
            for (z, l) in p.levels.iter().enumerate() {
                assert_eq!(l.tiles_x, base.tiles_x.div_ceil(1 << z));
                assert_eq!(l.tiles_y, base.tiles_y.div_ceil(1 << z));
            }
        }
    }

    #[test]
    fn written_level0_reassembles() {
        let src = pano(300, 170);
        let p = build_tile_pyramid(&src, 64).unwrap();
        let dir = tempfile::tempdir().unwrap();
        p.write(dir.path()).unwrap();
        let back = assemble_level(dir.path(), &p.meta(), 0).unwrap();
        assert_eq!(back.pixels, src.pixels);
        let l2 = assemble_level(dir.path(), &p.meta(), 2).unwrap();
        assert_eq!(l2, p.levels[2]);
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let a = OutputLock::acquire(dir.path()).unwrap();
        assert!(OutputLock::acquire(dir.path()).is_err());
        drop(a);
        assert!(OutputLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg: PipelineConfig =
            serde_json::from_str(r#"{"corpus":"c.jsonl","dim":8,"latent_id":3,"out_dir":"out"}"#).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.k_fractions.len(), 15);
        let bad = PipelineConfig {
            latent_id: 8,
            ..cfg.clone()
        };
        assert!(matches!(bad.validate(), Err(VistaError::LatentOutOfRange { .. })));
        let mut bad = cfg.clone();
        bad.panorama.width_px = 900;
        assert!(bad.validate().is_err());
        assert!(serde_json::from_str::<PipelineConfig>(
            r#"{"corpus":"c","dim":8,"latent_id":3,"out_dir":"o","typo":1}"#
        )
        .is_err());
        let seeded = cfg.with_seed(7);
        assert_eq!((seeded.layout.seed, seeded.panorama.seed), (7, 7));
    }

    #[test]
    fn full_scale_config_is_accepted() {
        let mut cfg = PipelineConfig::new("c.jsonl".into(), 16384, 10, "out".into());
        cfg.selection = Selection::Count(4000);
        cfg.panorama.width_px = 16000;
        cfg.panorama.height_px = 9000;
        cfg.panorama.steps = 100;
        cfg.validate().unwrap();
    }
}
