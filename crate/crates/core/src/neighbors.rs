//! Collaborative neighbors by inner product.
//!
//! The size-`k` subset maximizing `Σ_j u_iᵀu_j` is the `k` highest-scoring
//! items, so selection is an exact top-k scan.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborRow {
    pub item: String,
    pub neighbors: Vec<Neighbor>,
}

pub type NeighborTable = Vec<NeighborRow>;

fn dot(a: &[f32], b: &[f32]) -> f64 {
    // `+ 0.0` folds -0.0 into 0.0 so `total_cmp` treats zero scores as ties.
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum::<f64>()
        + 0.0
}

/// The `k` items other than `i` with the largest `u_iᵀu_j`, best first;
/// equal scores are ordered by ascending id.
pub fn top_k_neighbors(i: usize, emb: &EmbeddingSet, k: usize) -> Result<Vec<Neighbor>> {
    let n = emb.count();
    if i >= n {
        return Err(Error::KOutOfRange { k: i, count: n });
    }
    if k == 0 || k >= n {
        return Err(Error::KOutOfRange { k, count: n });
    }
    let ids = emb.ids();
    let ui = emb.row(i);
    let mut scored: Vec<(f64, usize)> = (0..n)
        .filter(|&j| j != i)
        .map(|j| (dot(ui, emb.row(j)), j))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| {
        b.0.total_cmp(&a.0).then_with(|| ids[a.1].cmp(&ids[b.1]))
    };
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    Ok(scored
        .into_iter()
        .map(|(score, j)| Neighbor {
            id: ids[j].clone(),
            score,
        })
        .collect())
}

/// [`top_k_neighbors`] for every item, with `k` capped at `count - 1`.
pub fn build_neighbor_table(emb: &EmbeddingSet, k: usize) -> Result<NeighborTable> {
    let n = emb.count();
    if n < 2 {
        return Err(Error::NotEnoughPoints {
            needed: 2,
            available: n,
        });
    }
    if k == 0 {
        return Err(Error::KOutOfRange { k, count: n });
    }
    let k = k.min(n - 1);
    (0..n)
        .into_par_iter()
        .map(|i| {
            Ok(NeighborRow {
                item: emb.ids()[i].clone(),
                neighbors: top_k_neighbors(i, emb, k)?,
            })
        })
        .collect()
}

pub fn neighbors_to_jsonl(table: &[NeighborRow]) -> Result<String> {
    let mut out = String::new();
    for row in table {
        out.push_str(&serde_json::to_string(row)?);
        out.push('\n');
    }
    Ok(out)
}
