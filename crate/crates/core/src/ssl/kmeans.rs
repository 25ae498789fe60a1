use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    /// `[k×D]`.
    pub centroids: Tensor,
    /// Sum of squared distances to the assigned centroid, after the initial
    /// assignment and after every Lloyd round.
    pub objective: Vec<f64>,
    /// Lloyd rounds actually run.
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid per point (ties to the lowest index) and the objective.
fn assign(x: &[f64], n: usize, d: usize, centroids: &[f64], k: usize) -> (Vec<usize>, Vec<f64>, f64) {
    let mut out = Vec::with_capacity(n);
    let mut dists = Vec::with_capacity(n);
    for i in 0..n {
        let p = &x[i * d..(i + 1) * d];
        let (mut best, mut best_d) = (0, f64::INFINITY);
        for c in 0..k {
            let dd = sq_dist(p, &centroids[c * d..(c + 1) * d]);
            if dd < best_d {
                best = c;
                best_d = dd;
            }
        }
        out.push(best);
        dists.push(best_d);
    }
    let obj = dists.iter().sum();
    (out, dists, obj)
}

/// k-means++ seeding followed by at most `iters` Lloyd rounds, stopping early
/// once assignments no longer change. A cluster left empty by an update is
/// moved onto the point farthest from its assigned centroid.
pub fn kmeans(features: &Tensor, k: usize, iters: usize, seed: u64) -> Result<KMeans> {
    if features.rank() != 2 {
        return Err(Error::Shape(format!(
            "kmeans expects N×D features, got {:?}",
            features.shape()
        )));
    }
    let (n, d) = (features.shape()[0], features.shape()[1]);
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!(
            "kmeans needs 1 ≤ k ≤ N, got k={k}, N={n}"
        )));
    }
    let x = features.data();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids = Vec::with_capacity(k * d);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&x[first * d..(first + 1) * d]);
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| sq_dist(&x[i * d..(i + 1) * d], &centroids[..d]))
        .collect();
    for _ in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, w) in nearest.iter().enumerate() {
                if r < *w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            // every point already coincides with a centroid
            rng.random_range(0..n)
        };
        let c = centroids.len() / d;
        centroids.extend_from_slice(&x[pick * d..(pick + 1) * d]);
        for (i, best) in nearest.iter_mut().enumerate() {
            *best = best.min(sq_dist(&x[i * d..(i + 1) * d], &centroids[c * d..(c + 1) * d]));
        }
    }

    let (mut assignments, mut dists, obj) = assign(x, n, d, &centroids, k);
    let mut objective = vec![obj];
    let mut iterations = 0;
    while iterations < iters {
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            sums[a * d..(a + 1) * d]
                .iter_mut()
                .zip(&x[i * d..(i + 1) * d])
                .for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids[c * d..(c + 1) * d].iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                    *dst = s * inv;
                }
            } else {
                let far = (0..n)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("n ≥ k ≥ 1");
                centroids[c * d..(c + 1) * d].copy_from_slice(&x[far * d..(far + 1) * d]);
                dists[far] = 0.0;
            }
        }
        let (next, next_dists, obj) = assign(x, n, d, &centroids, k);
        iterations += 1;
        objective.push(obj);
        dists = next_dists;
        let stable = next == assignments;
        assignments = next;
        if stable {
            break;
        }
    }
    Ok(KMeans {
        assignments,
        centroids: Tensor::new(vec![k, d], centroids)?,
        objective,
        iterations,
    })
}
