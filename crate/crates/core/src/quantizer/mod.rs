//! Multi-level residual vector quantization.
//!
//! Level `k` picks the codeword nearest to the residual left by levels
//! `1..k`; the reconstruction is the sum of the picked codewords and the code
//! tuple is the item's semantic ID.

mod io;
mod kmeans;
mod train;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::UsageStats;
use crate::error::{Error, Result};

pub use io::{read_sids, sids_to_csv, sids_to_jsonl, write_sids, SidRow, MODEL_VERSION};
pub use kmeans::{kmeans, kmeans_init, KMeans};
pub use train::{
    batch_gradients, quantize_set, train, BatchGradients, BatchLoss, Encoded, EpochReport,
    NuqVariant, QuantizerModel, TrainConfig, UpdateRule,
};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SemanticId {
    pub codes: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dedup_suffix: Option<u32>,
}

impl SemanticId {
    pub fn new(codes: Vec<u32>) -> Self {
        Self {
            codes,
            dedup_suffix: None,
        }
    }

    pub fn levels(&self) -> usize {
        self.codes.len()
    }
}

/// One level's codewords, `n_codes × dim`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CodebookRepr", into = "CodebookRepr")]
pub struct Codebook {
    /// One-based level index.
    pub level: usize,
    pub dim: usize,
    pub vectors: Vec<f64>,
    pub ema_counts: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CodebookRepr {
    level: usize,
    vectors: Vec<Vec<f64>>,
    ema_counts: Vec<f64>,
}

impl From<Codebook> for CodebookRepr {
    fn from(b: Codebook) -> Self {
        Self {
            level: b.level,
            vectors: b.vectors.chunks_exact(b.dim).map(<[f64]>::to_vec).collect(),
            ema_counts: b.ema_counts,
        }
    }
}

impl TryFrom<CodebookRepr> for Codebook {
    type Error = Error;

    fn try_from(r: CodebookRepr) -> Result<Self> {
        let mut b = Codebook::from_rows(r.level, &r.vectors)?;
        if r.ema_counts.len() != b.n_codes()
            || r.ema_counts.iter().any(|c| !(c.is_finite() && *c >= 0.0))
        {
            return Err(Error::Model(format!(
                "codebook {} has bad ema counts",
                r.level
            )));
        }
        b.ema_counts = r.ema_counts;
        Ok(b)
    }
}

impl Codebook {
    pub fn new(level: usize, dim: usize, vectors: Vec<f64>) -> Result<Self> {
        if dim == 0 || !vectors.len().is_multiple_of(dim) {
            return Err(Error::DimMismatch {
                expected: dim,
                actual: vectors.len(),
            });
        }
        let n = vectors.len() / dim;
        if n < 2 {
            return Err(Error::Config(format!(
                "codebook needs at least 2 codewords, got {n}"
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Model("non-finite codeword".into()));
        }
        Ok(Self {
            level,
            dim,
            vectors,
            ema_counts: vec![0.0; n],
        })
    }

    pub fn from_rows(level: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Model("ragged codebook".into()));
        }
        Self::new(level, dim, rows.concat())
    }

    pub fn n_codes(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn codeword(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn codeword_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Nearest codeword by squared distance; ties resolve to the lowest index.
    pub fn nearest(&self, r: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, e) in self.vectors.chunks_exact(self.dim).enumerate() {
            let d = sq_dist(r, e);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookStack {
    pub books: Vec<Codebook>,
    pub dim: usize,
}

impl CodebookStack {
    pub fn new(books: Vec<Codebook>) -> Result<Self> {
        let dim = books
            .first()
            .ok_or(Error::Config("empty codebook stack".into()))?
            .dim;
        if books.iter().any(|b| b.dim != dim) {
            return Err(Error::Model("codebooks disagree on dimension".into()));
        }
        Ok(Self { books, dim })
    }

    pub fn levels(&self) -> usize {
        self.books.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (k, b) in self.books.iter().enumerate() {
            if b.dim != self.dim || b.vectors.len() % b.dim != 0 {
                return Err(Error::Model(format!("codebook {} has wrong shape", k + 1)));
            }
            if b.n_codes() < 2 {
                return Err(Error::Model(format!(
                    "codebook {} has fewer than 2 codewords",
                    k + 1
                )));
            }
            if b.ema_counts.len() != b.n_codes() {
                return Err(Error::Model(format!(
                    "codebook {} ema counts mismatch",
                    k + 1
                )));
            }
            if b.vectors.iter().any(|v| !v.is_finite()) {
                return Err(Error::Model(format!(
                    "codebook {} has non-finite entries",
                    k + 1
                )));
            }
        }
        Ok(())
    }
}

/// Result of quantizing one vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub codes: SemanticId,
    /// `r_1 … r_K`, the residual left after each level.
    pub residuals: Vec<Vec<f64>>,
    pub d_hat: Vec<f64>,
}

impl Assignment {
    /// `r_0 … r_{K-1}`, the residual each level received.
    pub fn incoming(&self, d: &[f64]) -> Vec<Vec<f64>> {
        let k = self.residuals.len();
        let mut out = Vec::with_capacity(k);
        out.push(d.to_vec());
        out.extend(self.residuals[..k.saturating_sub(1)].iter().cloned());
        out
    }
}

pub fn rq_assign(d: &[f64], stack: &CodebookStack) -> Result<Assignment> {
    if d.len() != stack.dim {
        return Err(Error::DimMismatch {
            expected: stack.dim,
            actual: d.len(),
        });
    }
    let mut codes = Vec::with_capacity(stack.levels());
    let mut residuals = Vec::with_capacity(stack.levels());
    let mut d_hat = vec![0.0; d.len()];
    let mut r = d.to_vec();
    for book in &stack.books {
        let (c, _) = book.nearest(&r);
        let e = book.codeword(c);
        for ((ri, hi), ei) in r.iter_mut().zip(d_hat.iter_mut()).zip(e) {
            *ri -= ei;
            *hi += ei;
        }
        codes.push(c as u32);
        residuals.push(r.clone());
    }
    Ok(Assignment {
        codes: SemanticId::new(codes),
        residuals,
        d_hat,
    })
}

/// Quantization loss of one vector and its straight-through gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct RqLoss {
    pub value: f64,
    /// `Σ ‖sg[r_{k-1}] - e_k‖²`
    pub codebook_term: f64,
    /// `μ Σ ‖r_{k-1} - sg[e_k]‖²`
    pub commitment_term: f64,
    /// `∂/∂e_k = 2(e_k - r_{k-1})`, one entry per level.
    pub codeword_grads: Vec<Vec<f64>>,
    /// `∂/∂d = 2μ Σ_k (r_{k-1} - e_k)`.
    pub input_grad: Vec<f64>,
}

/// `Σ_k ‖sg[r_{k-1}] - e_k‖² + μ‖r_{k-1} - sg[e_k]‖²` over aligned levels.
pub fn rq_loss(incoming: &[Vec<f64>], selected: &[&[f64]], mu: f64) -> RqLoss {
    assert_eq!(incoming.len(), selected.len(), "levels must align");
    let dim = incoming.first().map_or(0, Vec::len);
    let mut sq = 0.0;
    let mut codeword_grads = Vec::with_capacity(incoming.len());
    let mut input_grad = vec![0.0; dim];
    for (r, e) in incoming.iter().zip(selected) {
        let mut g = Vec::with_capacity(dim);
        for ((ri, ei), gi) in r.iter().zip(e.iter()).zip(input_grad.iter_mut()) {
            let diff = ri - ei;
            sq += diff * diff;
            g.push(-2.0 * diff);
            *gi += 2.0 * mu * diff;
        }
        codeword_grads.push(g);
    }
    RqLoss {
        value: sq + mu * sq,
        codebook_term: sq,
        commitment_term: mu * sq,
        codeword_grads,
        input_grad,
    }
}

/// Codes and incoming residuals of one batch item.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchAssignment {
    pub codes: Vec<u32>,
    pub incoming: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CodebookStep {
    /// `e ← e - lr · ∂L/∂e` with `L` the codebook term summed over the batch.
    Gradient { lr: f64 },
    /// Exponential moving average of assigned residuals.
    Ema { decay: f64 },
}

/// Per-level gradient of the batch-summed codebook term, `Σ 2(e - r)`.
pub fn codebook_grads(stack: &CodebookStack, batch: &[BatchAssignment]) -> Vec<Vec<f64>> {
    let mut grads: Vec<Vec<f64>> = stack
        .books
        .iter()
        .map(|b| vec![0.0; b.vectors.len()])
        .collect();
    let dim = stack.dim;
    for item in batch {
        for (k, (&c, r)) in item.codes.iter().zip(&item.incoming).enumerate() {
            let c = c as usize;
            let e = stack.books[k].codeword(c);
            let g = &mut grads[k][c * dim..(c + 1) * dim];
            for ((gi, ei), ri) in g.iter_mut().zip(e).zip(r) {
                *gi += 2.0 * (ei - ri);
            }
        }
    }
    grads
}

pub fn update_codebooks(stack: &mut CodebookStack, batch: &[BatchAssignment], step: CodebookStep) {
    match step {
        CodebookStep::Gradient { lr } => {
            let grads = codebook_grads(stack, batch);
            for (book, g) in stack.books.iter_mut().zip(grads) {
                for (e, gi) in book.vectors.iter_mut().zip(g) {
                    *e -= lr * gi;
                }
            }
        }
        CodebookStep::Ema { decay } => {
            let dim = stack.dim;
            for (k, book) in stack.books.iter_mut().enumerate() {
                let n = book.n_codes();
                let mut counts = vec![0.0; n];
                let mut sums = vec![0.0; n * dim];
                for item in batch {
                    let c = item.codes[k] as usize;
                    counts[c] += 1.0;
                    for (s, r) in sums[c * dim..(c + 1) * dim]
                        .iter_mut()
                        .zip(&item.incoming[k])
                    {
                        *s += r;
                    }
                }
                for c in 0..n {
                    let old = book.ema_counts[c];
                    let new = decay * old + (1.0 - decay) * counts[c];
                    if counts[c] > 0.0 && new > 0.0 {
                        let e = book.codeword_mut(c);
                        for (ei, si) in e.iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                            *ei = (decay * old * *ei + (1.0 - decay) * si) / new;
                        }
                    }
                    book.ema_counts[c] = new;
                }
            }
        }
    }
}

/// Re-seeds every codeword with a zero count in `usage` to a distinct random
/// row of the matching level's `samples`. Returns `(level index, code)` pairs.
pub fn restart_dead_codes_indexed(
    stack: &mut CodebookStack,
    usage: &[UsageStats],
    samples: &[Vec<Vec<f64>>],
    rng: &mut impl Rng,
) -> Vec<(usize, usize)> {
    let mut restarted = Vec::new();
    for (k, book) in stack.books.iter_mut().enumerate() {
        let (Some(stats), Some(pool)) = (usage.get(k), samples.get(k)) else {
            continue;
        };
        if pool.is_empty() {
            continue;
        }
        let dead: Vec<usize> = stats
            .counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == 0)
            .map(|(i, _)| i)
            .collect();
        if dead.is_empty() {
            continue;
        }
        let picks: Vec<usize> = if dead.len() <= pool.len() {
            sample(rng, pool.len(), dead.len()).into_vec()
        } else {
            (0..dead.len())
                .map(|_| rng.random_range(0..pool.len()))
                .collect()
        };
        let mean_count = book.ema_counts.iter().sum::<f64>() / book.n_codes() as f64;
        for (&c, &p) in dead.iter().zip(&picks) {
            book.codeword_mut(c).copy_from_slice(&pool[p]);
            book.ema_counts[c] = mean_count;
            restarted.push((k, c));
        }
    }
    restarted
}

pub fn restart_dead_codes(
    stack: &mut CodebookStack,
    usage: &[UsageStats],
    samples: &[Vec<Vec<f64>>],
    rng: &mut impl Rng,
) -> usize {
    restart_dead_codes_indexed(stack, usage, samples, rng).len()
}
