//! k-means with k-means++ seeding, under squared-L2 or cosine distance.
//!
//! Under cosine distance the rows are unit-normalized up front and centroids
//! are re-normalized means (spherical k-means), so the objective is still
//! non-increasing across Lloyd iterations.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::vq::Metric;

#[derive(Clone, Debug)]
pub struct KMeansFit {
    /// `k × dim`, row-major.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    pub objective: f64,
    /// Objective after each assignment step.
    pub trace: Vec<f64>,
    /// Centroids seeded as jittered duplicates because the data had fewer
    /// distinct rows than `k`.
    pub padded: usize,
}

pub(crate) fn l2_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn normalize(a: &mut [f64]) {
    let n = norm(a);
    if n > 0.0 {
        a.iter_mut().for_each(|x| *x /= n);
    }
}

/// Distance between a row and a centroid. Cosine distance involving a zero
/// vector is 1.
pub(crate) fn distance(metric: Metric, a: &[f64], b: &[f64]) -> f64 {
    match metric {
        Metric::L2 => l2_sq(a, b),
        Metric::Cosine => {
            let (na, nb) = (norm(a), norm(b));
            if na == 0.0 || nb == 0.0 {
                return 1.0;
            }
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            1.0 - dot / (na * nb)
        }
    }
}

fn nearest(metric: Metric, row: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cent) in centroids.chunks_exact(dim).enumerate() {
        let d = distance(metric, row, cent);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding followed by at most `iters` Lloyd iterations.
pub fn kmeans<R: Rng + ?Sized>(
    rows: &[f64],
    dim: usize,
    k: usize,
    iters: usize,
    metric: Metric,
    rng: &mut R,
) -> Result<KMeansFit> {
    if dim == 0 || rows.len() % dim != 0 {
        return Err(Error::ShapeMismatch {
            op: "kmeans",
            left: (rows.len(), dim),
            right: (0, dim),
        });
    }
    let n = rows.len() / dim;
    if k == 0 || n == 0 {
        return Err(Error::Empty("kmeans input"));
    }
    let mut data = rows.to_vec();
    if metric == Metric::Cosine {
        data.chunks_exact_mut(dim).for_each(normalize);
    }

    // Seeding.
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&data[first * dim..(first + 1) * dim]);
    let mut dist: Vec<f64> = data
        .chunks_exact(dim)
        .map(|r| distance(metric, r, &centroids[..dim]))
        .collect();
    let mut padded = 0;
    for _ in 1..k {
        let total: f64 = dist.iter().sum();
        if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
                chosen = i;
            }
            centroids.extend_from_slice(&data[chosen * dim..(chosen + 1) * dim]);
        } else {
            let src = rng.random_range(0..n);
            let base = &data[src * dim..(src + 1) * dim];
            let scale = 1e-3 * (norm(base) + 1.0);
            let mut jittered: Vec<f64> = base
                .iter()
                .map(|&x| {
                    let z: f64 = StandardNormal.sample(rng);
                    x + scale * z
                })
                .collect();
            if metric == Metric::Cosine {
                normalize(&mut jittered);
            }
            centroids.extend_from_slice(&jittered);
            padded += 1;
        }
        let c = centroids.len() / dim - 1;
        let cent = centroids[c * dim..].to_vec();
        for (i, r) in data.chunks_exact(dim).enumerate() {
            dist[i] = dist[i].min(distance(metric, r, &cent));
        }
    }
    if padded > 0 {
        log::warn!("kmeans: only {} distinct seeds for k={k}; padded {padded} centroids with jittered duplicates", k - padded);
    }

    // Lloyd iterations.
    let mut assignments = vec![usize::MAX; n];
    let mut trace = Vec::new();
    for _ in 0..iters.max(1) {
        let mut changed = false;
        let mut objective = 0.0;
        for (i, r) in data.chunks_exact(dim).enumerate() {
            let (c, d) = nearest(metric, r, &centroids, dim);
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
            objective += d;
        }
        trace.push(objective);
        if !changed || iters == 0 {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, r) in data.chunks_exact(dim).enumerate() {
            let c = assignments[i];
            counts[c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(r) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let mut mean: Vec<f64> = sums[c * dim..(c + 1) * dim]
                .iter()
                .map(|s| s / counts[c] as f64)
                .collect();
            if metric == Metric::Cosine {
                if norm(&mean) == 0.0 {
                    continue;
                }
                normalize(&mut mean);
            }
            centroids[c * dim..(c + 1) * dim].copy_from_slice(&mean);
        }
    }
    // Final assignment against the final centroids.
    let mut objective = 0.0;
    for (i, r) in data.chunks_exact(dim).enumerate() {
        let (c, d) = nearest(metric, r, &centroids, dim);
        assignments[i] = c;
        objective += d;
    }
    Ok(KMeansFit {
        centroids,
        assignments,
        objective,
        trace,
        padded,
    })
}
