//! Embedding sets: the NUQ1 on-disk format, synthetic skewed corpora, and the
//! per-vector min/max statistics used by the transforms.
//!
//! A NUQ1 file is laid out as
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `NUQ1` |
//! | 4 | `u32` version (= 1) |
//! | 8 | `u64` row count |
//! | 4 | `u32` dimension |
//! | 4·count·dim | `f32` values, row-major |
//!
//! All integers and floats are little-endian. Item ids live in a sibling
//! `<stem>.ids.jsonl` file holding one JSON string per line.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"NUQ1";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 4 + 4 + 8 + 4;

/// `count × dim` matrix of item embeddings stored as `f32`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    ids: Vec<String>,
    data: Vec<f32>,
    dim: usize,
}

impl EmbeddingSet {
    pub fn new(ids: Vec<String>, data: Vec<f32>, dim: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptySet);
        }
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::DimMismatch {
                expected: ids.len() * dim,
                actual: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(Self { ids, data, dim })
    }

    /// Builds a set from `f64` rows, rounding to storage precision.
    pub fn from_rows(ids: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    actual: row.len(),
                });
            }
            data.extend(row.iter().map(|&v| v as f32));
        }
        Self::new(ids, data, dim)
    }

    pub fn count(&self) -> usize {
        self.ids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn rows_f64(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.count()).map(move |i| self.row_f64(i))
    }
}

/// Path of the id file that accompanies a NUQ1 matrix file.
pub fn ids_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.ids.jsonl"))
}

pub fn encode_nuq1(set: &EmbeddingSet) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * set.data.len());
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(set.count() as u64).to_le_bytes());
    buf.extend_from_slice(&(set.dim as u32).to_le_bytes());
    for v in &set.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Parses the matrix part of a NUQ1 file, returning `(count, dim, values)`.
pub fn decode_nuq1(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let dim = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes"));
    let expected =
        (HEADER_LEN as u64).saturating_add(count.saturating_mul(u64::from(dim)).saturating_mul(4));
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(Error::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(Error::TrailingBytes {
            extra: actual - expected,
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((count as usize, dim as usize, data))
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (count, dim, data) = decode_nuq1(&bytes)?;

    let id_path = ids_path(path);
    let file = fs::File::open(&id_path).map_err(|e| Error::io(&id_path, e))?;
    let mut ids = Vec::with_capacity(count);
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&id_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let id: String = serde_json::from_str(&line).map_err(|e| Error::BadIdLine {
            line: n + 1,
            reason: e.to_string(),
        })?;
        ids.push(id);
    }
    if ids.len() != count {
        return Err(Error::IdCountMismatch {
            expected: count,
            found: ids.len(),
        });
    }
    EmbeddingSet::new(ids, data, dim)
}

pub fn save_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    if set.count() == 0 {
        return Err(Error::EmptySet);
    }
    fs::write(path, encode_nuq1(set)).map_err(|e| Error::io(path, e))?;

    let id_path = ids_path(path);
    let file = fs::File::create(&id_path).map_err(|e| Error::io(&id_path, e))?;
    let mut w = BufWriter::new(file);
    for id in &set.ids {
        serde_json::to_writer(&mut w, id)?;
        w.write_all(b"\n").map_err(|e| Error::io(&id_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&id_path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VectorStats {
    pub x_min: f64,
    pub x_max: f64,
    pub delta: f64,
}

impl VectorStats {
    pub fn new(x_min: f64, x_max: f64) -> Self {
        Self {
            x_min,
            x_max,
            delta: x_max - x_min,
        }
    }

    pub const UNIT: VectorStats = VectorStats {
        x_min: 0.0,
        x_max: 1.0,
        delta: 1.0,
    };

    pub fn is_degenerate(&self) -> bool {
        self.delta <= 0.0
    }
}

pub fn vector_stats(v: &[f64]) -> Result<VectorStats> {
    if v.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &x in v {
        if x.is_nan() {
            return Err(Error::NanInput);
        }
        lo = lo.min(x);
        hi = hi.max(x);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Domain {
            value: if lo.is_finite() { hi } else { lo },
        });
    }
    Ok(VectorStats::new(lo, hi))
}

/// Min/max over every coordinate of every row (the corpus-global option).
pub fn corpus_stats(set: &EmbeddingSet) -> VectorStats {
    let (lo, hi) = set
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(f64::from(v)), hi.max(f64::from(v)))
        });
    VectorStats::new(lo, hi)
}

/// Maps `v` affinely onto `[0, 1]`. Degenerate stats (`delta == 0`) yield a
/// constant 0.5 vector and `true` as the second element.
pub fn normalize_unit(v: &[f64], stats: &VectorStats) -> (Vec<f64>, bool) {
    if stats.is_degenerate() {
        return (vec![0.5; v.len()], true);
    }
    let out = v
        .iter()
        .map(|&x| ((x - stats.x_min) / stats.delta).clamp(0.0, 1.0))
        .collect();
    (out, false)
}

pub fn denormalize_unit(u: &[f64], stats: &VectorStats, degenerate: bool) -> Vec<f64> {
    if degenerate {
        return vec![stats.x_min; u.len()];
    }
    u.iter().map(|&x| stats.x_min + stats.delta * x).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_dense_clusters: usize,
    pub dense_mass: f64,
    pub cluster_spread: f64,
    pub tail_spread: f64,
    pub dim: usize,
    pub n_items: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_dense_clusters: 5,
            dense_mass: 0.8,
            cluster_spread: 0.1,
            tail_spread: 1.0,
            dim: 32,
            n_items: 10_000,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.dense_mass) {
            return Err(Error::Config(format!(
                "dense_mass {} outside [0, 1]",
                self.dense_mass
            )));
        }
        if self.n_dense_clusters == 0 || self.dim == 0 || self.n_items == 0 {
            return Err(Error::Config(
                "cluster count, dimension and item count must be at least 1".into(),
            ));
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite())
            || !(self.tail_spread > 0.0 && self.tail_spread.is_finite())
        {
            return Err(Error::Config("spreads must be positive and finite".into()));
        }
        Ok(())
    }

    pub fn n_dense(&self) -> usize {
        (self.dense_mass * self.n_items as f64).floor() as usize
    }
}

/// A synthetic corpus together with the ground truth it was drawn from.
#[derive(Debug, Clone)]
pub struct SyntheticDraw {
    pub set: EmbeddingSet,
    /// `n_dense_clusters` centers, each of length `dim`.
    pub centers: Vec<Vec<f64>>,
    /// Cluster index per item, `None` for the broad tail.
    pub labels: Vec<Option<usize>>,
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<EmbeddingSet> {
    gen_synthetic_labeled(spec).map(|d| d.set)
}

/// Dense items come first (round-robin over clusters), followed by the tail.
pub fn gen_synthetic_labeled(spec: &SyntheticSpec) -> Result<SyntheticDraw> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let centers: Vec<Vec<f64>> = (0..spec.n_dense_clusters)
        .map(|_| (0..spec.dim).map(|_| unit.sample(&mut rng)).collect())
        .collect();

    let n_dense = spec.n_dense();
    let mut data = Vec::with_capacity(spec.n_items * spec.dim);
    let mut labels = Vec::with_capacity(spec.n_items);
    for i in 0..spec.n_items {
        if i < n_dense {
            let c = if spec.n_dense_clusters == 1 {
                0
            } else {
                rng.random_range(0..spec.n_dense_clusters)
            };
            for &m in &centers[c] {
                let v = m + spec.cluster_spread * unit.sample(&mut rng);
                data.push(v as f32);
            }
            labels.push(Some(c));
        } else {
            for _ in 0..spec.dim {
                data.push((spec.tail_spread * unit.sample(&mut rng)) as f32);
            }
            labels.push(None);
        }
    }
    let ids = (0..spec.n_items).map(|i| format!("item-{i}")).collect();
    let set = EmbeddingSet::new(ids, data, spec.dim)?;
    Ok(SyntheticDraw {
        set,
        centers,
        labels,
    })
}
