use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{sq_dist, Codebook};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the assigned centroid.
    pub distortion: f64,
    pub iterations: usize,
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn assign_all(data: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<(usize, f64)> {
    data.par_iter().map(|p| nearest(p, centroids)).collect()
}

fn plus_plus(data: &[Vec<f64>], n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let m = data.len();
    let mut chosen = vec![false; m];
    let first = rng.random_range(0..m);
    chosen[first] = true;
    let mut centroids = vec![data[first].clone()];
    let mut d2: Vec<f64> = data.iter().map(|p| sq_dist(p, &data[first])).collect();
    while centroids.len() < n {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` just past the running sum.
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            chosen.iter().position(|&c| !c).unwrap()
        };
        chosen[pick] = true;
        let c = data[pick].clone();
        d2.par_iter_mut()
            .zip(data.par_iter())
            .for_each(|(w, p)| *w = w.min(sq_dist(p, &c)));
        centroids.push(c);
    }
    centroids
}

/// k-means++ seeding followed by Lloyd iterations.
///
/// Ties go to the lowest centroid index. A cluster left empty by an update is
/// moved onto the point currently farthest from its centroid.
pub fn kmeans(data: &[Vec<f64>], n: usize, iters: usize, seed: u64) -> Result<KMeans> {
    if n == 0 {
        return Err(Error::Config("n_codes must be positive".into()));
    }
    if data.len() < n {
        return Err(Error::NotEnoughPoints {
            needed: n,
            available: data.len(),
        });
    }
    let dim = data[0].len();
    if let Some(bad) = data.iter().find(|p| p.len() != dim) {
        return Err(Error::DimMismatch {
            expected: dim,
            actual: bad.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus(data, n, &mut rng);
    let mut assigned = assign_all(data, &centroids);
    let mut iterations = 0;
    for _ in 0..iters {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; n];
        let mut counts = vec![0usize; n];
        for (p, &(c, _)) in data.iter().zip(&assigned) {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(p) {
                *s += x;
            }
        }
        let empty: Vec<usize> = (0..n).filter(|&c| counts[c] == 0).collect();
        for (c, sum) in sums.into_iter().enumerate() {
            if counts[c] > 0 {
                let k = counts[c] as f64;
                centroids[c] = sum.into_iter().map(|s| s / k).collect();
            }
        }
        if !empty.is_empty() {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.sort_by(|&a, &b| assigned[b].1.total_cmp(&assigned[a].1).then(a.cmp(&b)));
            for (&c, &p) in empty.iter().zip(&order) {
                centroids[c] = data[p].clone();
            }
        }
        let next = assign_all(data, &centroids);
        let stable = empty.is_empty() && next.iter().zip(&assigned).all(|(a, b)| a.0 == b.0);
        assigned = next;
        if stable {
            break;
        }
    }
    let distortion = assigned.iter().map(|a| a.1).sum();
    Ok(KMeans {
        centroids,
        assignments: assigned.into_iter().map(|a| a.0).collect(),
        distortion,
        iterations,
    })
}

/// Builds one codebook level from `data` with [`kmeans`].
pub fn kmeans_init(
    level: usize,
    data: &[Vec<f64>],
    n_codes: usize,
    iters: usize,
    seed: u64,
) -> Result<Codebook> {
    let km = kmeans(data, n_codes, iters, seed)?;
    Codebook::from_rows(level, &km.centroids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_cover() {
        let data: Vec<Vec<f64>> = (0..6)
            .map(|i| vec![i as f64 * 3.0, (i * i) as f64])
            .collect();
        let km = kmeans(&data, 6, 10, 4).unwrap();
        assert_eq!(km.distortion, 0.0);
        let mut c = km.centroids.clone();
        c.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(c, data);
    }

    #[test]
    fn too_few_points() {
        let data = vec![vec![0.0]; 3];
        assert!(matches!(
            kmeans(&data, 4, 5, 0),
            Err(Error::NotEnoughPoints {
                needed: 4,
                available: 3
            })
        ));
    }

    #[test]
    fn duplicate_points_still_seed() {
        let data = vec![vec![1.0, 1.0]; 5];
        let km = kmeans(&data, 3, 5, 0).unwrap();
        assert_eq!(km.centroids.len(), 3);
        assert_eq!(km.distortion, 0.0);
    }

    #[test]
    fn deterministic() {
        let data: Vec<Vec<f64>> = (0..50)
            .map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()])
            .collect();
        assert_eq!(
            kmeans(&data, 7, 20, 9).unwrap(),
            kmeans(&data, 7, 20, 9).unwrap()
        );
        assert_eq!(
            kmeans_init(1, &data, 7, 20, 9).unwrap(),
            kmeans_init(1, &data, 7, 20, 9).unwrap()
        );
    }
}
