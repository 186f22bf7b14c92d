//! Lloyd's k-means with k-means++ seeding over row-major `f32` data.

use rand::Rng;

#[derive(Debug, Clone)]
pub struct KMeans {
    pub k: usize,
    pub dim: usize,
    pub centroids: Vec<f32>,
    /// Mean squared distance to the assigned centroid, recorded after each
    /// assignment step; the last entry is for the returned centroids.
    pub objective: Vec<f64>,
    /// Whether seeding had to reuse points because there were fewer distinct
    /// points than clusters.
    pub duplicate_centroids: bool,
}

pub fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum()
}

/// Index of the nearest centroid, lowest index on ties.
pub fn nearest(centroids: &[f32], dim: usize, v: &[f32]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(centroid, v);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn seed_plus_plus<R: Rng>(data: &[f32], dim: usize, k: usize, rng: &mut R) -> (Vec<f32>, bool) {
    let n = data.len() / dim;
    let point = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(point(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(point(i), point(first))).collect();
    let mut duplicates = false;
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if *w > 0.0 {
                    chosen = i;
                    if target < *w {
                        break;
                    }
                    target -= *w;
                }
            }
            chosen
        } else {
            duplicates = true;
            rng.gen_range(0..n)
        };
        centroids.extend_from_slice(point(pick));
        for (i, w) in d2.iter_mut().enumerate() {
            *w = w.min(sq_dist(point(i), point(pick)));
        }
    }
    (centroids, duplicates)
}

/// Clusters `data` (n x dim, row-major) into `k` groups. Empty clusters keep
/// their previous centroid, so the objective never increases.
pub fn kmeans<R: Rng>(data: &[f32], dim: usize, k: usize, iters: usize, rng: &mut R) -> KMeans {
    assert!(dim > 0 && k > 0 && data.len() >= dim * k && data.len() % dim == 0);
    let n = data.len() / dim;
    let (mut centroids, duplicate_centroids) = seed_plus_plus(data, dim, k, rng);
    let mut objective = Vec::with_capacity(iters + 1);
    let mut assign = vec![0usize; n];
    for it in 0..=iters {
        let mut total = 0.0;
        for (i, row) in data.chunks_exact(dim).enumerate() {
            let (c, d) = nearest(&centroids, dim, row);
            assign[i] = c;
            total += d;
        }
        objective.push(total / n as f64);
        if it == iters {
            break;
        }
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, row) in data.chunks_exact(dim).enumerate() {
            let c = assign[i];
            counts[c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row) {
                *s += f64::from(*x);
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            for j in 0..dim {
                centroids[c * dim + j] = (sums[c * dim + j] / counts[c] as f64) as f32;
            }
        }
    }
    KMeans {
        k,
        dim,
        centroids,
        objective,
        duplicate_centroids,
    }
}
