//! Panorama rendering from a render plan: a deterministic mock rasterizer
//! and an HTTP client for an external diffusion service.

use std::io::{BufReader, Cursor};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cartography::{DensityField, RenderPlan};
use crate::corpus::LatentSlice;
use crate::error::{Result, VistaError};

const PROVENANCE_KEY: &str = "vista-provenance";
const PAPER: [f64; 3] = [246.0, 241.0, 228.0];
const INK: [f64; 3] = [62.0, 104.0, 156.0];
const TEXT: [u8; 3] = [24, 24, 24];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Backend {
    Mock,
    Remote {
        url: String,
        #[serde(default = "default_retries")]
        retries: u32,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
    },
}

fn default_retries() -> u32 {
    2
}

fn default_timeout() -> u64 {
    3600
}

impl Backend {
    pub fn id(&self) -> String {
        match self {
            Backend::Mock => "mock".into(),
            Backend::Remote { url, .. } => format!("remote:{url}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PanoramaConfig {
    pub width_px: u32,
    pub height_px: u32,
    pub steps: usize,
    pub seed: u64,
    pub backend: Backend,
}

impl Default for PanoramaConfig {
    fn default() -> Self {
        Self {
            width_px: 1600,
            height_px: 900,
            steps: 100,
            seed: 42,
            backend: Backend::Mock,
        }
    }
}

impl PanoramaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width_px < 64 || self.height_px < 64 {
            return Err(VistaError::invalid(format!(
                "panorama {}x{} is below the 64 px minimum",
                self.width_px, self.height_px
            )));
        }
        if self.steps == 0 {
            return Err(VistaError::invalid("steps must be >= 1"));
        }
        if let Backend::Remote { url, .. } = &self.backend {
            if !(url.starts_with("http://") || url.starts_with("https://")) {
                return Err(VistaError::invalid(format!("unsupported backend url {url:?}")));
            }
        }
        Ok(())
    }

    /// Checks the pixel aspect against a map aspect ratio (1% tolerance).
    pub fn check_aspect(&self, ratio: f64) -> Result<()> {
        let own = self.width_px as f64 / self.height_px as f64;
        if (own / ratio - 1.0).abs() > 0.01 {
            return Err(VistaError::invalid(format!(
                "panorama aspect {own:.4} differs from map aspect {ratio:.4} by more than 1%"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub backend: String,
    pub config_hash: String,
}

/// 8-bit RGB image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Panorama {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
    pub provenance: Provenance,
}

impl Panorama {
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Hex SHA-256 of the pixel buffer.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(&self.pixels))
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        encode_png(self.width, self.height, &self.pixels, Some(&self.provenance))
    }
}

pub fn encode_png(width: u32, height: u32, rgb: &[u8], provenance: Option<&Provenance>) -> Result<Vec<u8>> {
    if rgb.len() != width as usize * height as usize * 3 {
        return Err(VistaError::Image(format!(
            "{} bytes for a {width}x{height} RGB image",
            rgb.len()
        )));
    }
    let mut out = Vec::new();
    let img = |e: png::EncodingError| VistaError::Image(e.to_string());
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        if let Some(p) = provenance {
            enc.add_text_chunk(PROVENANCE_KEY.into(), serde_json::to_string(p)?)
                .map_err(img)?;
        }
        let mut w = enc.write_header().map_err(img)?;
        w.write_image_data(rgb).map_err(img)?;
        w.finish().map_err(img)?;
    }
    Ok(out)
}

/// Decoded PNG as RGB plus the embedded provenance, if any.
pub struct DecodedPng {
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<u8>,
    pub provenance: Option<Provenance>,
}

pub fn decode_png<R: std::io::BufRead + std::io::Seek>(r: R) -> Result<DecodedPng> {
    let img = |e: png::DecodingError| VistaError::Image(e.to_string());
    let mut dec = png::Decoder::new_with_limits(r, png::Limits { bytes: usize::MAX });
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(img)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| VistaError::Image("image too large".into()))?;
    let mut buf = vec![0; size];
    let frame = reader.next_frame(&mut buf).map_err(img)?;
    buf.truncate(frame.buffer_size());
    let channels = match frame.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(VistaError::Image("unexpanded palette image".into())),
    };
    let rgb = if channels == 3 {
        buf
    } else {
        buf.chunks_exact(channels)
            .flat_map(|px| match channels {
                1 | 2 => [px[0], px[0], px[0]],
                _ => [px[0], px[1], px[2]],
            })
            .collect()
    };
    let provenance = reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .find(|t| t.keyword == PROVENANCE_KEY)
        .and_then(|t| serde_json::from_str(&t.text).ok());
    Ok(DecodedPng {
        width: frame.width,
        height: frame.height,
        rgb,
        provenance,
    })
}

pub fn save_panorama(p: &Panorama, path: &Path) -> Result<()> {
    let bytes = p.to_png()?;
    std::fs::write(path, bytes).map_err(|e| VistaError::io(format!("writing {}", path.display()), e))
}

pub fn load_panorama(path: &Path) -> Result<Panorama> {
    let f = std::fs::File::open(path).map_err(|e| VistaError::io(format!("opening {}", path.display()), e))?;
    let d = decode_png(BufReader::new(f))?;
    Ok(Panorama {
        width: d.width,
        height: d.height,
        pixels: d.rgb,
        provenance: d.provenance.unwrap_or(Provenance {
            backend: "unknown".into(),
            config_hash: String::new(),
        }),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireRegion {
    pub id: String,
    pub bbox: [u32; 4],
    pub prompts: Vec<String>,
}

/// Request body of `POST {url}/render`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderRequest {
    pub width: u32,
    pub height: u32,
    pub steps: usize,
    pub seed: u64,
    pub regions: Vec<WireRegion>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

fn check_plan(plan: &RenderPlan, slice: &LatentSlice, cfg: &PanoramaConfig) -> Result<()> {
    cfg.validate()?;
    if (plan.width, plan.height) != (cfg.width_px, cfg.height_px) {
        return Err(VistaError::SizeMismatch(format!(
            "plan is {}x{}, config is {}x{}",
            plan.width, plan.height, cfg.width_px, cfg.height_px
        )));
    }
    if plan.steps != cfg.steps {
        return Err(VistaError::SizeMismatch(format!(
            "plan has {} steps, config {}",
            plan.steps, cfg.steps
        )));
    }
    plan.validate()?;
    if let Some(i) = plan
        .regions
        .iter()
        .flat_map(|r| r.schedule.iter())
        .find(|&&i| i >= slice.len())
    {
        return Err(VistaError::invalid(format!(
            "plan references item {i} of a {}-item slice",
            slice.len()
        )));
    }
    Ok(())
}

pub fn build_request(plan: &RenderPlan, slice: &LatentSlice, cfg: &PanoramaConfig) -> Result<RenderRequest> {
    check_plan(plan, slice, cfg)?;
    Ok(RenderRequest {
        width: plan.width,
        height: plan.height,
        steps: plan.steps,
        seed: cfg.seed,
        regions: plan
            .regions
            .iter()
            .map(|r| WireRegion {
                id: r.id.clone(),
                bbox: r.bbox,
                prompts: r.schedule.iter().map(|&i| slice.members[i].item.text.clone()).collect(),
            })
            .collect(),
    })
}

fn provenance(req: &RenderRequest, cfg: &PanoramaConfig, extra: &[u8]) -> Result<Provenance> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&cfg.backend)?);
    h.update(serde_json::to_vec(req)?);
    h.update(extra);
    Ok(Provenance {
        backend: cfg.backend.id(),
        config_hash: hex::encode(h.finalize()),
    })
}

/// Renders with the backend named in `cfg`.
pub fn render(
    plan: &RenderPlan,
    slice: &LatentSlice,
    density: &DensityField,
    cfg: &PanoramaConfig,
) -> Result<Panorama> {
    match cfg.backend {
        Backend::Mock => render_mock(plan, slice, density, cfg),
        Backend::Remote { .. } => render_remote(plan, slice, cfg),
    }
}

/// Deterministic stand-in for diffusion: density-shaded background, one
/// hashed color per region (from its step-0 item id) and the step-0 text
/// stamped in a 5x7 bitmap font.
pub fn render_mock(
    plan: &RenderPlan,
    slice: &LatentSlice,
    density: &DensityField,
    cfg: &PanoramaConfig,
) -> Result<Panorama> {
    let req = build_request(plan, slice, cfg)?;
    let (w, h) = (cfg.width_px as usize, cfg.height_px as usize);
    let mut pixels = vec![0u8; w * h * 3];
    let peak = density.max();
    for y in 0..h {
        for x in 0..w {
            let t = if peak > 0.0 {
                sample_bilinear(density, (x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64) / peak
            } else {
                0.0
            };
            let px = &mut pixels[3 * (y * w + x)..3 * (y * w + x) + 3];
            for c in 0..3 {
                px[c] = (PAPER[c] + t * (INK[c] - PAPER[c])).round() as u8;
            }
        }
    }
    for region in &plan.regions {
        let item = &slice.members[region.schedule[0]].item;
        let tint = hashed_color(&item.id);
        let [bx, by, bw, bh] = region.bbox.map(|v| v as usize);
        for y in by..by + bh {
            for x in bx..bx + bw {
                let px = &mut pixels[3 * (y * w + x)..3 * (y * w + x) + 3];
                for c in 0..3 {
                    px[c] = (px[c] as u16 + tint[c] as u16).div_ceil(2) as u8;
                }
            }
        }
        stamp_text(&mut pixels, w, region.bbox, &item.text);
    }
    let mut extra = Vec::with_capacity(density.values.len() * 8 + 16);
    extra.extend_from_slice(&(density.grid_w as u64).to_le_bytes());
    extra.extend_from_slice(&(density.grid_h as u64).to_le_bytes());
    density
        .values
        .iter()
        .for_each(|v| extra.extend_from_slice(&v.to_le_bytes()));
    Ok(Panorama {
        width: cfg.width_px,
        height: cfg.height_px,
        pixels,
        provenance: provenance(&req, cfg, &extra)?,
    })
}

/// Density at fractional panorama position `(u, v)` in `[0, 1]^2`.
fn sample_bilinear(f: &DensityField, u: f64, v: f64) -> f64 {
    let gx = (u * f.grid_w as f64 - 0.5).clamp(0.0, (f.grid_w - 1) as f64);
    let gy = (v * f.grid_h as f64 - 0.5).clamp(0.0, (f.grid_h - 1) as f64);
    let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(f.grid_w - 1), (y0 + 1).min(f.grid_h - 1));
    let (tx, ty) = (gx - x0 as f64, gy - y0 as f64);
    let top = f.get(x0, y0) * (1.0 - tx) + f.get(x1, y0) * tx;
    let bottom = f.get(x0, y1) * (1.0 - tx) + f.get(x1, y1) * tx;
    top * (1.0 - ty) + bottom * ty
}

fn hashed_color(id: &str) -> [u8; 3] {
    let d = Sha256::digest(id.as_bytes());
    [64 + d[0] / 2, 64 + d[1] / 2, 64 + d[2] / 2]
}

fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        ' ' => [0; 7],
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '.' => [0, 0, 0, 0, 0, 0x0C, 0x0C],
        ',' => [0, 0, 0, 0, 0x0C, 0x04, 0x08],
        '-' => [0, 0, 0, 0x1F, 0, 0, 0],
        '\'' => [0x0C, 0x04, 0x08, 0, 0, 0, 0],
        '!' => [0x04, 0x04, 0x04, 0x04, 0x04, 0, 0x04],
        '?' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0, 0x04],
        ':' => [0, 0x0C, 0x0C, 0, 0x0C, 0x0C, 0],
        '/' => [0, 0x01, 0x02, 0x04, 0x08, 0x10, 0],
        _ => [0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F],
    }
}

/// Word-wrapped text inside `bbox`, clipped to it.
fn stamp_text(pixels: &mut [u8], width: usize, bbox: [u32; 4], text: &str) {
    let [bx, by, bw, bh] = bbox.map(|v| v as usize);
    let scale = (bh / 80).clamp(1, 8);
    let (advance, line_h, margin) = (6 * scale, 9 * scale, 2 * scale);
    let per_line = (bw.saturating_sub(2 * margin) / advance).max(1);
    let mut lines: Vec<String> = vec![String::new()];
    for word in text.split_whitespace() {
        let cur = lines.last_mut().expect("non-empty");
        let need = if cur.is_empty() {
            word.chars().count()
        } else {
            cur.chars().count() + 1 + word.chars().count()
        };
        if need <= per_line || cur.is_empty() {
            if !cur.is_empty() {
                cur.push(' ');
            }
            cur.push_str(word);
        } else {
            lines.push(word.to_string());
        }
    }
    for (row, line) in lines.iter().enumerate() {
        let oy = by + margin + row * line_h;
        if oy + 7 * scale > by + bh {
            break;
        }
        for (col, ch) in line.chars().enumerate() {
            let ox = bx + margin + col * advance;
            if ox + 5 * scale > bx + bw {
                break;
            }
            for (gy, bits) in glyph(ch).iter().enumerate() {
                for gx in 0..5 {
                    if bits & (0x10 >> gx) == 0 {
                        continue;
                    }
                    for sy in 0..scale {
                        for sx in 0..scale {
                            let (x, y) = (ox + gx * scale + sx, oy + gy * scale + sy);
                            let i = 3 * (y * width + x);
                            pixels[i..i + 3].copy_from_slice(&TEXT);
                        }
                    }
                }
            }
        }
    }
}

/// Sends the plan to `{url}/render` and validates the returned PNG.
pub fn render_remote(plan: &RenderPlan, slice: &LatentSlice, cfg: &PanoramaConfig) -> Result<Panorama> {
    let Backend::Remote {
        url,
        retries,
        timeout_secs,
    } = &cfg.backend
    else {
        return Err(VistaError::invalid("render_remote needs a remote backend"));
    };
    let req = build_request(plan, slice, cfg)?;
    let body = serde_json::to_vec(&req)?;
    let endpoint = format!("{}/render", url.trim_end_matches('/'));
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(*timeout_secs)))
        .http_status_as_error(false)
        .build()
        .into();

    let max_attempts = retries + 1;
    let mut last = None;
    for attempt in 1..=max_attempts {
        if attempt > 1 {
            std::thread::sleep(Duration::from_millis(100 * (attempt as u64 - 1)));
        }
        let mut resp = match agent
            .post(&endpoint)
            .header("content-type", "application/json")
            .send(&body[..])
        {
            Ok(r) => r,
            Err(e) => {
                log::warn!("render attempt {attempt}/{max_attempts} failed: {e}");
                last = Some(VistaError::Connection {
                    attempts: attempt,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let status = resp.status().as_u16();
        let bytes = match resp.body_mut().with_config().limit(u64::MAX).read_to_vec() {
            Ok(b) => b,
            Err(e) => {
                last = Some(VistaError::Connection {
                    attempts: attempt,
                    message: format!("reading response: {e}"),
                });
                continue;
            }
        };
        if status != 200 {
            let detail = serde_json::from_slice::<ErrorBody>(&bytes)
                .map(|b| b.error)
                .unwrap_or_else(|_| "response without an error document".into());
            let err = VistaError::Protocol {
                attempts: attempt,
                message: format!("status {status}: {detail}"),
            };
            if status >= 500 {
                last = Some(err);
                continue;
            }
            return Err(err);
        }
        let decoded = decode_png(Cursor::new(&bytes)).map_err(|e| VistaError::Protocol {
            attempts: attempt,
            message: format!("body is not a PNG: {e}"),
        })?;
        if (decoded.width, decoded.height) != (cfg.width_px, cfg.height_px) {
            return Err(VistaError::DimensionMismatch {
                attempts: attempt,
                expected: (cfg.width_px, cfg.height_px),
                actual: (decoded.width, decoded.height),
            });
        }
        return Ok(Panorama {
            width: decoded.width,
            height: decoded.height,
            pixels: decoded.rgb,
            provenance: provenance(&req, cfg, &[])?,
        });
    }
    Err(last.expect("at least one attempt"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cartography::RenderRegion;
    use crate::corpus::{ActivationVector, Item, SliceMember};
    use crate::layout::Bounds;
    use std::io::{BufRead, Read, Write};
    use std::net::TcpListener;

    fn slice(n: usize) -> LatentSlice {
        LatentSlice {
            latent_id: 0,
            source_size: n,
            members: (0..n)
                .map(|i| SliceMember {
                    item: Item {
                        id: format!("item-{i}"),
                        text: format!("caption number {i} about things"),
                    },
                    vector: ActivationVector::new(vec![0], vec![1.0 + i as f64], 4).unwrap(),
                    raw_activation: 1.0 + i as f64,
                    norm_activation: i as f64 / n as f64,
                })
                .collect(),
        }
    }

    fn density() -> DensityField {
        let (w, h) = (16, 9);
        DensityField {
            grid_w: w,
            grid_h: h,
            values: (0..w * h)
                .map(|i| ((i % w) as f64 - 8.0).powi(2).recip().min(1.0))
                .collect(),
            bounds: Bounds {
                min_x: 0.0,
                min_y: 0.0,
                max_x: 16.0,
                max_y: 9.0,
            },
            bandwidth: 1.0,
        }
    }

    fn plan(first: usize) -> RenderPlan {
        let mk = |id: &str, bbox: [u32; 4], reps: Vec<usize>| RenderRegion {
            id: id.into(),
            tile: [0, 0],
            bbox,
            schedule: (0..4).map(|s| reps[s % reps.len()]).collect(),
            representatives: reps,
        };
        RenderPlan {
            steps: 4,
            width: 128,
            height: 72,
            regions: vec![
                mk("t0_0", [0, 0, 64, 36], vec![first, 1]),
                mk("t1_1", [64, 36, 64, 36], vec![2, 3]),
            ],
        }
    }

    fn cfg() -> PanoramaConfig {
        PanoramaConfig {
            width_px: 128,
            height_px: 72,
            steps: 4,
            ..Default::default()
        }
    }

    #[test]
    fn empty_plan_is_background() {
        let p = RenderPlan {
            steps: 4,
            width: 128,
            height: 72,
            regions: vec![],
        };
        let img = render_mock(&p, &slice(4), &density(), &cfg()).unwrap();
        let peak = density().max();
        for (x, y) in [(0u32, 0u32), (64, 36), (127, 71)] {
            let t = sample_bilinear(&density(), (x as f64 + 0.5) / 128.0, (y as f64 + 0.5) / 72.0) / peak;
            let expect: Vec<u8> = (0..3)
                .map(|c| (PAPER[c] + t * (INK[c] - PAPER[c])).round() as u8)
                .collect();
            assert_eq!(img.pixel(x, y).to_vec(), expect);
        }
    }

    #[test]
    fn mock_is_deterministic() {
        let a = render_mock(&plan(0), &slice(5), &density(), &cfg()).unwrap();
        let b = render_mock(&plan(0), &slice(5), &density(), &cfg()).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a.provenance, b.provenance);
    }

    #[test]
    fn changed_item_only_touches_its_region() {
        let a = render_mock(&plan(0), &slice(5), &density(), &cfg()).unwrap();
        let b = render_mock(&plan(4), &slice(5), &density(), &cfg()).unwrap();
        assert_ne!(a.pixels, b.pixels);
        assert_ne!(a.provenance.config_hash, b.provenance.config_hash);
        for y in 0..72 {
            for x in 0..128 {
                if !(x < 64 && y < 36) {
                    assert_eq!(a.pixel(x, y), b.pixel(x, y), "({x},{y})");
                }
            }
        }
    }

    #[test]
    fn provenance_tracks_config() {
        let a = render_mock(&plan(0), &slice(5), &density(), &cfg()).unwrap();
        let c = PanoramaConfig { seed: 7, ..cfg() };
        let b = render_mock(&plan(0), &slice(5), &density(), &c).unwrap();
        assert_ne!(a.provenance.config_hash, b.provenance.config_hash);
    }

    #[test]
    fn region_out_of_bounds() {
        let mut p = plan(0);
        p.regions[1].bbox = [100, 36, 64, 36];
        assert!(matches!(
            render_mock(&p, &slice(5), &density(), &cfg()),
            Err(VistaError::RegionOutOfBounds { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(PanoramaConfig { width_px: 63, ..cfg() }.validate().is_err());
        assert!(PanoramaConfig { steps: 0, ..cfg() }.validate().is_err());
        assert!(cfg().check_aspect(16.0 / 9.0).is_ok());
        assert!(cfg().check_aspect(1.0).is_err());
    }

    #[test]
    fn png_round_trip() {
        let img = render_mock(&plan(0), &slice(5), &density(), &cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        save_panorama(&img, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], &[0x89, 0x50, 0x4E, 0x47]);
        assert_eq!(load_panorama(&path).unwrap(), img);
        assert!(save_panorama(&img, &dir.path().join("missing/p.png")).is_err());
    }

    /// Serves canned responses, one per connection, and returns the bodies
    /// it received.
    fn stub(responses: Vec<(u16, Vec<u8>)>) -> (String, std::thread::JoinHandle<Vec<Vec<u8>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = std::io::BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut req = vec![0; len];
                reader.read_exact(&mut req).unwrap();
                bodies.push(req);
                let ctype = if status == 200 { "image/png" } else { "application/json" };
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: {ctype}\r\ncontent-length: {}\r\nconnection: close\r\n\r\n",
                    body.len()
                )
                .unwrap();
                stream.write_all(&body).unwrap();
            }
            bodies
        });
        (url, handle)
    }

    fn remote(url: String, retries: u32) -> PanoramaConfig {
        PanoramaConfig {
            backend: Backend::Remote {
                url,
                retries,
                timeout_secs: 10,
            },
            ..cfg()
        }
    }

    #[test]
    fn remote_round_trip() {
        let px: Vec<u8> = (0..128 * 72 * 3).map(|i| (i % 251) as u8).collect();
        let png = encode_png(128, 72, &px, None).unwrap();
        let (url, handle) = stub(vec![(200, png)]);
        let img = render_remote(&plan(0), &slice(5), &remote(url, 0)).unwrap();
        assert_eq!(img.pixels, px);
        let bodies = handle.join().unwrap();
        let req: RenderRequest = serde_json::from_slice(&bodies[0]).unwrap();
        assert_eq!((req.width, req.height, req.steps, req.seed), (128, 72, 4, 42));
        assert_eq!(req.regions[0].prompts.len(), 4);
        assert_eq!(req.regions[0].prompts[1], "caption number 1 about things");
        let raw: serde_json::Value = serde_json::from_slice(&bodies[0]).unwrap();
        assert_eq!(raw["regions"][1]["bbox"], serde_json::json!([64, 36, 64, 36]));
    }

    #[test]
    fn remote_wrong_dimensions() {
        let png = encode_png(64, 64, &vec![0; 64 * 64 * 3], None).unwrap();
        let (url, _h) = stub(vec![(200, png)]);
        let err = render_remote(&plan(0), &slice(5), &remote(url, 0)).unwrap_err();
        assert!(matches!(
            err,
            VistaError::DimensionMismatch {
                attempts: 1,
                actual: (64, 64),
                ..
            }
        ));
    }

    #[test]
    fn remote_unreachable() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let err = render_remote(&plan(0), &slice(5), &remote(format!("http://127.0.0.1:{port}"), 2)).unwrap_err();
        assert!(matches!(err, VistaError::Connection { attempts: 3, .. }), "{err}");
    }

    #[test]
    fn remote_error_document() {
        let (url, _h) = stub(vec![(400, br#"{"error":"bad region"}"#.to_vec())]);
        let err = render_remote(&plan(0), &slice(5), &remote(url, 3)).unwrap_err();
        match err {
            VistaError::Protocol { attempts, message } => {
                assert_eq!(attempts, 1);
                assert!(message.contains("bad region"));
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn remote_retries_server_errors() {
        let png = encode_png(128, 72, &vec![9; 128 * 72 * 3], None).unwrap();
        let (url, handle) = stub(vec![(503, br#"{"error":"busy"}"#.to_vec()), (200, png)]);
        let img = render_remote(&plan(0), &slice(5), &remote(url, 1)).unwrap();
        assert_eq!(img.pixel(3, 3), [9, 9, 9]);
        assert_eq!(handle.join().unwrap().len(), 2);
    }

    #[test]
    fn remote_garbage_body() {
        let (url, _h) = stub(vec![(200, b"not a png".to_vec())]);
        let err = render_remote(&plan(0), &slice(5), &remote(url, 0)).unwrap_err();
        assert!(matches!(err, VistaError::Protocol { attempts: 1, .. }));
    }
}
