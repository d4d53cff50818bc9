use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

pub const MAX_LLOYD_ITERS: usize = 300;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Inertia after every assignment step.
    pub inertia_history: Vec<f64>,
}

impl KMeans {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().expect("at least one assignment")
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations until the assignment
/// stops changing or [`MAX_LLOYD_ITERS`]. An empty cluster is reseeded at
/// the point farthest from its current centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeans> {
    let n = points.len();
    if k == 0 || n < k {
        return Err(Error::contract(format!("kmeans needs 1 <= k <= n, got k = {k}, n = {n}")));
    }
    let mut r = rng::rng(seed);
    let mut centroids = vec![points[r.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = r.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            r.random_range(0..n)
        };
        centroids.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &centroids[centroids.len() - 1]));
        }
    }

    let mut labels = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest(p, &centroids);
            inertia += d;
            if labels[i] != j {
                labels[i] = j;
                changed = true;
            }
        }
        // reseed empty clusters at the worst-served point
        for j in 0..k {
            if labels.iter().all(|&l| l != j) {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = dist2(&points[a], &centroids[labels[a]]);
                        let db = dist2(&points[b], &centroids[labels[b]]);
                        da.partial_cmp(&db).expect("finite").then(b.cmp(&a))
                    })
                    .expect("n >= 1");
                inertia -= dist2(&points[far], &centroids[labels[far]]);
                labels[far] = j;
                centroids[j] = points[far].clone();
                changed = true;
            }
        }
        history.push(inertia);
        if !changed {
            break;
        }
        let d = points[0].len();
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    Ok(KMeans {
        labels,
        centroids,
        inertia_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::adjusted_rand_index;
    use rand_distr::{Distribution, Normal};

    fn blobs(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut r = rng::rng(seed);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for i in 0..60 {
            let c = i % 3;
            pts.push(centers[c].iter().map(|v| v + noise.sample(&mut r)).collect());
            truth.push(c);
        }
        (pts, truth)
    }

    #[test]
    fn recovers_blobs() {
        let (pts, truth) = blobs(1);
        let km = kmeans(&pts, 3, 7).unwrap();
        assert_eq!(adjusted_rand_index(&km.labels, &truth).unwrap(), 1.0);
        for w in km.inertia_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        assert_eq!(kmeans(&pts, 3, 7).unwrap(), km);
    }

    #[test]
    fn k_equals_n() {
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let km = kmeans(&pts, 5, 0).unwrap();
        let mut l = km.labels.clone();
        l.sort();
        assert_eq!(l, [0, 1, 2, 3, 4]);
        assert_eq!(km.inertia(), 0.0);
        assert!(kmeans(&pts, 6, 0).is_err());
    }
}
