//! Corpus ingestion and latent-slice selection.
//!
//! A corpus is a JSONL file of captions paired with sparse activation
//! vectors. A [`LatentSlice`] is the top-activating subset of the corpus for
//! one latent, with per-member activations min-max normalized onto `[0, 1]`
//! so they can serve as the latent axis of the hybrid distance.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VistaError};

/// A text item of the dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    pub text: String,
}

/// Sparse activation vector: strictly increasing latent indices with
/// strictly positive magnitudes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawVector")]
pub struct ActivationVector {
    indices: Vec<u32>,
    values: Vec<f64>,
    dim: u32,
}

#[derive(Deserialize)]
struct RawVector {
    indices: Vec<u32>,
    values: Vec<f64>,
    dim: u32,
}

impl TryFrom<RawVector> for ActivationVector {
    type Error = VistaError;

    fn try_from(raw: RawVector) -> Result<Self> {
        ActivationVector::new(raw.indices, raw.values, raw.dim)
    }
}

impl ActivationVector {
    pub fn new(indices: Vec<u32>, values: Vec<f64>, dim: u32) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(VistaError::InvalidVector(format!(
                "{} indices but {} values",
                indices.len(),
                values.len()
            )));
        }
        if let Some(w) = indices.windows(2).find(|w| w[0] >= w[1]) {
            return Err(VistaError::InvalidVector(format!(
                "indices not strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        if let Some(&last) = indices.last() {
            if last >= dim {
                return Err(VistaError::InvalidVector(format!(
                    "index {last} >= dimensionality {dim}"
                )));
            }
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(VistaError::InvalidVector(format!(
                "value {v} is not a finite positive activation"
            )));
        }
        Ok(Self { indices, values, dim })
    }

    /// Sparse form of a dense vector; exact zeros are dropped.
    pub fn from_dense(dense: &[f64], dim: u32) -> Result<Self> {
        if dense.len() > dim as usize {
            return Err(VistaError::InvalidVector(format!(
                "dense vector of length {} exceeds dimensionality {dim}",
                dense.len()
            )));
        }
        let (indices, values) = dense
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i as u32, *v))
            .unzip();
        Self::new(indices, values, dim)
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> u32 {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// Activation on `latent`, 0.0 when the latent is not stored.
    pub fn activation_of(&self, latent: u32) -> Result<f64> {
        if latent >= self.dim {
            return Err(VistaError::LatentOutOfRange { latent, dim: self.dim });
        }
        Ok(self.indices.binary_search(&latent).map_or(0.0, |pos| self.values[pos]))
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Exact sparse dot product by merging the two index lists.
    pub fn dot(&self, other: &ActivationVector) -> f64 {
        let (a, b) = (&self.indices, &other.indices);
        let (mut i, mut j) = (0, 0);
        let mut acc = 0.0;
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += self.values[i] * other.values[j];
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }

    /// Multiplies every stored value by `factor` (> 0).
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.indices.clone(),
            self.values.iter().map(|v| v * factor).collect(),
            self.dim,
        )
    }
}

/// Free function form of [`ActivationVector::activation_of`].
pub fn activation_of(v: &ActivationVector, latent: u32) -> Result<f64> {
    v.activation_of(latent)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub item: Item,
    pub vector: ActivationVector,
}

/// An ordered collection of items sharing one activation dimensionality.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    entries: Vec<Entry>,
    dim: u32,
}

impl Corpus {
    pub fn new(entries: Vec<Entry>, dim: u32) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for (line, e) in entries.iter().enumerate() {
            validate_item(&e.item)?;
            if e.vector.dim() != dim {
                return Err(VistaError::InvalidVector(format!(
                    "item {:?} has dimensionality {} but corpus has {dim}",
                    e.item.id,
                    e.vector.dim()
                )));
            }
            if !seen.insert(e.item.id.as_str()) {
                return Err(VistaError::DuplicateId {
                    id: e.item.id.clone(),
                    line: line + 1,
                });
            }
        }
        Ok(Self { entries, dim })
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn dim(&self) -> u32 {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Writes the corpus in the sparse JSONL format.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.entries {
            let rec = SparseRecordRef {
                id: &e.item.id,
                text: &e.item.text,
                indices: e.vector.indices(),
                values: e.vector.values(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(|e| VistaError::io("writing corpus", e))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| VistaError::io(format!("creating {}", path.display()), e))?;
        let mut w = BufWriter::new(f);
        self.write_jsonl(&mut w)?;
        w.flush()
            .map_err(|e| VistaError::io(format!("writing {}", path.display()), e))
    }
}

fn validate_item(item: &Item) -> Result<()> {
    if item.id.is_empty() {
        return Err(VistaError::invalid("item id must be non-empty"));
    }
    if item.text.is_empty() {
        return Err(VistaError::invalid(format!("item {:?} has empty text", item.id)));
    }
    Ok(())
}

#[derive(Serialize)]
struct SparseRecordRef<'a> {
    id: &'a str,
    text: &'a str,
    indices: &'a [u32],
    values: &'a [f64],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusRecord {
    id: String,
    text: String,
    #[serde(default)]
    indices: Option<Vec<u64>>,
    #[serde(default)]
    values: Option<Vec<f64>>,
    #[serde(default)]
    vector: Option<Vec<f64>>,
}

impl CorpusRecord {
    fn into_entry(self, dim: u32) -> std::result::Result<Entry, String> {
        let vector = match (self.indices, self.values, self.vector) {
            (Some(indices), Some(values), None) => {
                let indices = indices
                    .into_iter()
                    .map(|i| {
                        u32::try_from(i)
                            .ok()
                            .filter(|&i| i < dim)
                            .ok_or_else(|| format!("index {i} >= dimensionality {dim}"))
                    })
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                ActivationVector::new(indices, values, dim)
            }
            (None, None, Some(dense)) => ActivationVector::from_dense(&dense, dim),
            _ => return Err("expected either \"indices\"+\"values\" or \"vector\"".to_string()),
        }
        .map_err(|e| e.to_string())?;
        let item = Item {
            id: self.id,
            text: self.text,
        };
        validate_item(&item).map_err(|e| e.to_string())?;
        Ok(Entry { item, vector })
    }
}

/// Reads a JSONL corpus; blank lines are skipped. `origin` labels errors.
pub fn read_corpus<R: BufRead>(reader: R, dim: u32, origin: &Path) -> Result<Corpus> {
    let parse_err = |line: usize, message: String| VistaError::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in reader.lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|e| VistaError::io(format!("reading {}", origin.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        let entry = rec.into_entry(dim).map_err(|m| parse_err(lineno, m))?;
        if !seen.insert(entry.item.id.clone()) {
            return Err(VistaError::DuplicateId {
                id: entry.item.id,
                line: lineno,
            });
        }
        entries.push(entry);
    }
    Corpus::new(entries, dim)
}

pub fn load_corpus(path: &Path, dim: u32) -> Result<Corpus> {
    let f = File::open(path).map_err(|e| VistaError::io(format!("opening {}", path.display()), e))?;
    read_corpus(BufReader::new(f), dim, path)
}

/// How many items to keep when slicing a corpus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// Keep `ceil(fraction * |corpus|)` items.
    Fraction(f64),
    Count(usize),
}

impl Selection {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Selection::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
                Err(VistaError::invalid(format!("selection fraction {f} outside (0, 1]")))
            }
            Selection::Count(0) => Err(VistaError::invalid("selection count must be >= 1")),
            _ => Ok(()),
        }
    }

    pub fn target(&self, corpus_len: usize) -> usize {
        match *self {
            // the epsilon keeps 0.02 * 200000 from rounding up to 4001
            Selection::Fraction(f) => (f * corpus_len as f64 - 1e-9).ceil().max(0.0) as usize,
            Selection::Count(c) => c,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMember {
    pub item: Item,
    pub vector: ActivationVector,
    pub raw_activation: f64,
    pub norm_activation: f64,
}

/// The top-activating items for one latent, ordered by descending activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSlice {
    pub latent_id: u32,
    pub members: Vec<SliceMember>,
    pub source_size: usize,
}

impl LatentSlice {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Latent-axis coordinate of every member.
    pub fn axis_values(&self, normalized: bool) -> Vec<f64> {
        self.members
            .iter()
            .map(|m| {
                if normalized {
                    m.norm_activation
                } else {
                    m.raw_activation
                }
            })
            .collect()
    }

    pub fn vectors(&self) -> Vec<&ActivationVector> {
        self.members.iter().map(|m| &m.vector).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| VistaError::io(format!("creating {}", path.display()), e))?;
        let mut w = BufWriter::new(f);
        serde_json::to_writer(&mut w, self)?;
        w.flush()
            .map_err(|e| VistaError::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| VistaError::io(format!("opening {}", path.display()), e))?;
        let slice: LatentSlice = serde_json::from_reader(BufReader::new(f))?;
        if slice.is_empty() {
            return Err(VistaError::EmptySlice(slice.latent_id));
        }
        Ok(slice)
    }
}

/// Selects the items with the highest activation on `latent_id`.
///
/// Zero-activation items never enter the slice, even if that leaves it
/// shorter than requested. Ties at the cutoff keep the earlier corpus item.
pub fn select_top_activating(corpus: &Corpus, latent_id: u32, selection: Selection) -> Result<LatentSlice> {
    selection.validate()?;
    if latent_id >= corpus.dim() {
        return Err(VistaError::LatentOutOfRange {
            latent: latent_id,
            dim: corpus.dim(),
        });
    }
    let mut ranked = Vec::new();
    for (idx, e) in corpus.entries().iter().enumerate() {
        let a = e.vector.activation_of(latent_id)?;
        if a > 0.0 {
            ranked.push((a, idx));
        }
    }
    if ranked.is_empty() {
        return Err(VistaError::EmptySlice(latent_id));
    }
    ranked.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    ranked.truncate(selection.target(corpus.len()).max(1));

    let max = ranked[0].0;
    let min = ranked[ranked.len() - 1].0;
    let span = max - min;
    let members = ranked
        .into_iter()
        .map(|(a, idx)| {
            let e = &corpus.entries()[idx];
            SliceMember {
                item: e.item.clone(),
                vector: e.vector.clone(),
                raw_activation: a,
                norm_activation: if span > 0.0 { (a - min) / span } else { 0.0 },
            }
        })
        .collect();
    Ok(LatentSlice {
        latent_id,
        members,
        source_size: corpus.len(),
    })
}
