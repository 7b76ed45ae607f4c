//! Codebook usage statistics, usage-distribution divergences, and the 2-d PCA
//! projection used for density plots.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};
use crate::quantizer::SemanticId;

/// Minimum count for the stricter utilization variant.
pub const EFFECTIVE_MIN_COUNT: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageStats {
    /// Zero-based level index.
    pub level: usize,
    pub counts: Vec<u64>,
    /// Shannon entropy in nats.
    pub entropy: f64,
    pub perplexity: f64,
    /// Fraction of codewords with a non-zero count.
    pub utilization: f64,
    /// Fraction of codewords used at least [`EFFECTIVE_MIN_COUNT`] times.
    pub utilization_min5: f64,
}

impl UsageStats {
    pub fn from_counts(level: usize, counts: Vec<u64>) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 || counts.is_empty() {
            return Err(Error::EmptyInput);
        }
        let n = counts.len() as f64;
        let entropy = entropy_nats(&counts);
        let used = counts.iter().filter(|&&c| c > 0).count() as f64;
        let used5 = counts.iter().filter(|&&c| c >= EFFECTIVE_MIN_COUNT).count() as f64;
        Ok(Self {
            level,
            entropy,
            perplexity: entropy.exp(),
            utilization: used / n,
            utilization_min5: used5 / n,
            counts,
        })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

fn entropy_nats(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let total = total as f64;
    -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            p * p.ln()
        })
        .sum::<f64>()
}

fn level_counts(sids: &[SemanticId], level: usize, n_codes: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; n_codes];
    for sid in sids {
        let code = *sid.codes.get(level).ok_or(Error::LevelOutOfRange {
            level,
            levels: sid.codes.len(),
        })? as usize;
        if code >= n_codes {
            return Err(Error::CodeOutOfRange { code, n_codes });
        }
        counts[code] += 1;
    }
    Ok(counts)
}

/// Histogram of codes at `level` (zero-based) with entropy, perplexity and utilization.
pub fn usage_stats(sids: &[SemanticId], level: usize, n_codes: usize) -> Result<UsageStats> {
    if sids.is_empty() {
        return Err(Error::EmptyInput);
    }
    UsageStats::from_counts(level, level_counts(sids, level, n_codes)?)
}

pub fn usage_all_levels(sids: &[SemanticId], n_codes: usize) -> Result<Vec<UsageStats>> {
    let levels = sids.first().ok_or(Error::EmptyInput)?.codes.len();
    (0..levels).map(|l| usage_stats(sids, l, n_codes)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelBias {
    pub level: usize,
    pub total_variation: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub levels: Vec<LevelBias>,
    pub mean_tv: f64,
    pub max_tv: f64,
    pub mean_kl: f64,
}

/// `½ Σ |p - q|` over two count vectors of equal length.
pub fn total_variation(p: &[u64], q: &[u64]) -> f64 {
    let (np, nq) = (p.iter().sum::<u64>() as f64, q.iter().sum::<u64>() as f64);
    0.5 * p
        .iter()
        .zip(q)
        .map(|(&a, &b)| (a as f64 / np - b as f64 / nq).abs())
        .sum::<f64>()
}

/// `KL(p ‖ q)` with add-one smoothing on `q`.
pub fn smoothed_kl(p: &[u64], q: &[u64]) -> f64 {
    let np = p.iter().sum::<u64>() as f64;
    let nq = q.iter().sum::<u64>() as f64 + q.len() as f64;
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0)
        .map(|(&a, &b)| {
            let pi = a as f64 / np;
            let qi = (b as f64 + 1.0) / nq;
            pi * (pi / qi).ln()
        })
        .sum::<f64>()
        .max(0.0)
}

/// Per-level divergence between target and generated code usage.
pub fn compare_bias(
    target: &[SemanticId],
    generated: &[SemanticId],
    n_codes: usize,
) -> Result<BiasReport> {
    let kt = target.first().ok_or(Error::EmptyInput)?.codes.len();
    let kg = generated.first().ok_or(Error::EmptyInput)?.codes.len();
    if kt != kg {
        return Err(Error::LevelMismatch(kt, kg));
    }
    if let Some(s) = target.iter().chain(generated).find(|s| s.codes.len() != kt) {
        return Err(Error::LevelMismatch(kt, s.codes.len()));
    }
    let mut levels = Vec::with_capacity(kt);
    for level in 0..kt {
        let p = level_counts(target, level, n_codes)?;
        let q = level_counts(generated, level, n_codes)?;
        levels.push(LevelBias {
            level,
            total_variation: total_variation(&p, &q),
            kl: smoothed_kl(&p, &q),
        });
    }
    let k = levels.len() as f64;
    Ok(BiasReport {
        mean_tv: levels.iter().map(|l| l.total_variation).sum::<f64>() / k,
        max_tv: levels.iter().map(|l| l.total_variation).fold(0.0, f64::max),
        mean_kl: levels.iter().map(|l| l.kl).sum::<f64>() / k,
        levels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollisionStats {
    pub n_distinct: usize,
    /// Items whose code tuple is shared with at least one other item.
    pub n_colliding_items: usize,
    pub max_bucket: usize,
}

/// Collisions over code tuples, ignoring any dedup suffix.
pub fn collision_stats(sids: &[SemanticId]) -> Result<CollisionStats> {
    if sids.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut buckets: HashMap<&[u32], usize> = HashMap::new();
    for sid in sids {
        *buckets.entry(sid.codes.as_slice()).or_default() += 1;
    }
    Ok(CollisionStats {
        n_distinct: buckets.len(),
        n_colliding_items: buckets.values().filter(|&&n| n > 1).sum(),
        max_bucket: buckets.values().copied().max().unwrap_or(0),
    })
}

pub const PCA_TOL: f64 = 1e-9;
pub const PCA_MAX_ITERS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca2d {
    pub coords: Vec<[f64; 2]>,
    pub explained: [f64; 2],
    pub components: [Vec<f64>; 2],
    pub mean: Vec<f64>,
}

fn covariance(data: &EmbeddingSet) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (data.count(), data.dim());
    let mut mean = vec![0.0; d];
    for row in data.rows_f64() {
        mean.iter_mut().zip(&row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for row in data.rows_f64() {
        for (c, (v, m)) in centered.iter_mut().zip(row.iter().zip(&mean)) {
            *c = v - m;
        }
        for a in 0..d {
            let ca = centered[a];
            if ca == 0.0 {
                continue;
            }
            for b in a..d {
                cov[a * d + b] += ca * centered[b];
            }
        }
    }
    let denom = (n - 1).max(1) as f64;
    for a in 0..d {
        for b in a..d {
            let v = cov[a * d + b] / denom;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    (mean, cov)
}

fn mat_vec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..d)
        .map(|i| {
            m[i * d..(i + 1) * d]
                .iter()
                .zip(v)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Leading eigenpair of a symmetric PSD matrix by power iteration.
fn power_iteration(m: &[f64], d: usize, rng: &mut impl Rng) -> (f64, Vec<f64>) {
    let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n0 = norm(&v);
    if n0 == 0.0 {
        v = vec![0.0; d];
        v[0] = 1.0;
    } else {
        v.iter_mut().for_each(|x| *x /= n0);
    }
    for _ in 0..PCA_MAX_ITERS {
        let w = mat_vec(m, &v);
        let nw = norm(&w);
        if nw == 0.0 {
            return (0.0, v);
        }
        let next: Vec<f64> = w.iter().map(|x| x / nw).collect();
        let diff = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        if diff < PCA_TOL {
            break;
        }
    }
    // Rayleigh quotient for the eigenvalue; sign fixed so the largest entry is positive.
    let mv = mat_vec(m, &v);
    let lambda = v.iter().zip(&mv).map(|(a, b)| a * b).sum::<f64>().max(0.0);
    let pivot = v
        .iter()
        .copied()
        .fold(0.0_f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
    if pivot < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    (lambda, v)
}

/// Projects onto the top two principal directions (power iteration with deflation).
pub fn pca2d(data: &EmbeddingSet, seed: u64) -> Result<Pca2d> {
    let (n, d) = (data.count(), data.dim());
    if n < 2 {
        return Err(Error::NotEnoughPoints {
            needed: 2,
            available: n,
        });
    }
    let (mean, mut cov) = covariance(data);
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if trace <= 0.0 {
        return Ok(Pca2d {
            coords: vec![[0.0, 0.0]; n],
            explained: [0.0, 0.0],
            components: [vec![0.0; d], vec![0.0; d]],
            mean,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l1, v1) = power_iteration(&cov, d, &mut rng);
    for a in 0..d {
        for b in 0..d {
            cov[a * d + b] -= l1 * v1[a] * v1[b];
        }
    }
    let (l2, v2) = if d > 1 {
        power_iteration(&cov, d, &mut rng)
    } else {
        (0.0, vec![0.0; d])
    };
    // Deflation leaves round-off sized eigenvalues for rank-1 data.
    let l2 = if l2 <= trace * 1e-12 { 0.0 } else { l2 };
    let coords = data
        .rows_f64()
        .map(|row| {
            let c: Vec<f64> = row.iter().zip(&mean).map(|(v, m)| v - m).collect();
            [
                c.iter().zip(&v1).map(|(a, b)| a * b).sum(),
                c.iter().zip(&v2).map(|(a, b)| a * b).sum(),
            ]
        })
        .collect();
    Ok(Pca2d {
        coords,
        explained: [l1 / trace, l2 / trace],
        components: [v1, v2],
        mean,
    })
}

/// Density rank per point from a `bins × bins` histogram: points in the
/// densest cell get the highest rank, equal cells share a rank.
pub fn density_ranks(coords: &[[f64; 2]], bins: usize) -> Vec<usize> {
    if coords.is_empty() {
        return Vec::new();
    }
    let bins = bins.max(1);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for c in coords {
        for k in 0..2 {
            lo[k] = lo[k].min(c[k]);
            hi[k] = hi[k].max(c[k]);
        }
    }
    let cell = |c: &[f64; 2]| -> usize {
        let idx = |k: usize| {
            let span = hi[k] - lo[k];
            if span <= 0.0 {
                0
            } else {
                (((c[k] - lo[k]) / span * bins as f64) as usize).min(bins - 1)
            }
        };
        idx(0) * bins + idx(1)
    };
    let mut hist = vec![0usize; bins * bins];
    let cells: Vec<usize> = coords.iter().map(cell).collect();
    for &c in &cells {
        hist[c] += 1;
    }
    let mut levels: Vec<usize> = hist.iter().copied().filter(|&h| h > 0).collect();
    levels.sort_unstable();
    levels.dedup();
    cells
        .iter()
        .map(|&c| levels.binary_search(&hist[c]).expect("occupied cell"))
        .collect()
}

/// Plot data `level,code,count` (levels one-based).
pub fn usage_csv(stats: &[UsageStats]) -> String {
    let mut out = String::from("level,code,count\n");
    for s in stats {
        for (code, count) in s.counts.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", s.level + 1, code, count);
        }
    }
    out
}

/// Plot data `x,y,density_rank`.
pub fn points_csv(coords: &[[f64; 2]], ranks: &[usize]) -> String {
    let mut out = String::from("x,y,density_rank\n");
    for (c, r) in coords.iter().zip(ranks) {
        let _ = writeln!(out, "{},{},{}", c[0], c[1], r);
    }
    out
}
