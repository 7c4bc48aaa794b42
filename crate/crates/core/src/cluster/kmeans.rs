use rayon::prelude::*;

use crate::rng::Rng;

use super::{ClusterError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMeansConfig {
    pub max_iters: usize,
    /// Stop when the relative inertia improvement falls below this.
    pub tol: f64,
    /// Independent seedings; the run with the lowest inertia wins.
    pub restarts: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-4,
            restarts: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    /// `k * dim` centroid coordinates.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn cluster_sizes(&self, k: usize) -> Vec<usize> {
        let mut sizes = vec![0; k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    centroids
        .chunks_exact(dim)
        .enumerate()
        .map(|(j, c)| (j, sq_dist(p, c)))
        .fold(
            (0, f64::INFINITY),
            |best, cur| if cur.1 < best.1 { cur } else { best },
        )
}

/// k-means++ seeding followed by Lloyd iterations over `points` (flat, `dim` wide).
pub fn kmeans(
    points: &[f64],
    dim: usize,
    k: usize,
    cfg: KMeansConfig,
    rng: &mut Rng,
) -> Result<KMeansResult> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(ClusterError::InvalidArgument(format!(
            "{} values do not form {dim}-dimensional points",
            points.len()
        )));
    }
    let n = points.len() / dim;
    if k == 0 || n < k {
        return Err(ClusterError::TooFewPoints {
            points: n,
            clusters: k,
        });
    }
    let mut best = lloyd(points, dim, k, cfg, rng);
    for _ in 1..cfg.restarts {
        let run = lloyd(points, dim, k, cfg, rng);
        if run.inertia < best.inertia {
            best = run;
        }
    }
    Ok(best)
}

fn lloyd(points: &[f64], dim: usize, k: usize, cfg: KMeansConfig, rng: &mut Rng) -> KMeansResult {
    let n = points.len() / dim;
    let pt = |i: usize| &points[i * dim..(i + 1) * dim];

    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(pt(rng.below(n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(pt(i), &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.uniform() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            rng.below(n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(pt(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(pt(i), &centroids[start..]));
        }
    }

    let mut assignments = vec![0usize; n];
    let mut prev = f64::INFINITY;
    let mut iterations = 0;
    for it in 0..cfg.max_iters.max(1) {
        iterations = it + 1;
        let assigned: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .map(|i| nearest(pt(i), &centroids, dim))
            .collect();
        let inertia: f64 = assigned.iter().map(|a| a.1).sum();
        for (slot, a) in assignments.iter_mut().zip(&assigned) {
            *slot = a.0;
        }

        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(pt(i)) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                // Re-seed an empty cluster at the worst-fit point.
                let far = assigned
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                centroids[j * dim..(j + 1) * dim].copy_from_slice(pt(far));
            } else {
                for d in 0..dim {
                    centroids[j * dim + d] = sums[j * dim + d] / counts[j] as f64;
                }
            }
        }
        if prev.is_finite() && (prev - inertia) <= cfg.tol * prev.max(f64::MIN_POSITIVE) {
            break;
        }
        prev = inertia;
    }
    // Final assignment against the last centroid update.
    let mut inertia = 0.0;
    for (i, slot) in assignments.iter_mut().enumerate() {
        let (a, d) = nearest(pt(i), &centroids, dim);
        *slot = a;
        inertia += d;
    }
    KMeansResult {
        centroids,
        assignments,
        inertia,
        iterations,
    }
}
