//! Lloyd's k-means with k-means++ seeding, used to derive data slices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::StreamError;
use crate::trace::SliceId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceAssignment {
    /// Slice of every input point, in input order.
    pub labels: Vec<SliceId>,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances to the assigned centroid after each
    /// assignment pass.
    pub objective: Vec<f64>,
}

impl SliceAssignment {
    pub fn slices(&self) -> usize {
        self.centroids.len()
    }

    /// Nearest centroid of an arbitrary point.
    pub fn assign(&self, point: &[f64]) -> SliceId {
        nearest(&self.centroids, point).0
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f64>], p: &[f64]) -> (SliceId, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, p);
        if d < best.1 {
            best = (i as SliceId, d);
        }
    }
    best
}

fn seed_centroids<P: AsRef<[f64]>>(points: &[P], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].as_ref().to_vec()];
    let mut dist: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p.as_ref(), &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            dist.iter()
                .position(|d| {
                    acc += d;
                    acc > target
                })
                .unwrap_or_else(|| dist.iter().rposition(|d| *d > 0.0).unwrap_or(n - 1))
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].as_ref().to_vec();
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(sq_dist(p.as_ref(), &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Clusters `points` into `slices` groups. Deterministic given `seed`; the
/// assignment pass runs in parallel and does not depend on the thread count.
pub fn kmeans_slices<P>(points: &[P], slices: usize, seed: u64, max_iters: usize) -> Result<SliceAssignment, StreamError>
where
    P: AsRef<[f64]> + Sync,
{
    if slices == 0 || points.len() < slices {
        return Err(StreamError::TooFewExamples {
            needed: slices.max(1),
            got: points.len(),
        });
    }
    let dim = points[0].as_ref().len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(points, slices, &mut rng);
    let mut labels: Vec<SliceId> = Vec::new();
    let mut objective = Vec::new();
    for _ in 0..max_iters.max(1) {
        let assigned: Vec<(SliceId, f64)> = points
            .par_iter()
            .map(|p| nearest(&centroids, p.as_ref()))
            .collect();
        objective.push(assigned.iter().map(|a| a.1).sum());
        let next: Vec<SliceId> = assigned.into_iter().map(|a| a.0).collect();
        let converged = next == labels;
        labels = next;
        if converged {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; slices];
        let mut counts = vec![0usize; slices];
        for (p, l) in points.iter().zip(&labels) {
            counts[*l as usize] += 1;
            for (s, x) in sums[*l as usize].iter_mut().zip(p.as_ref()) {
                *s += x;
            }
        }
        for ((c, s), n) in centroids.iter_mut().zip(sums).zip(counts) {
            if n > 0 {
                *c = s.into_iter().map(|v| v / n as f64).collect();
            }
        }
    }
    Ok(SliceAssignment {
        labels,
        centroids,
        objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn blobs(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<u32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for i in 0..n {
            let b = (i % 2) as u32;
            let c = if b == 0 { [0.0, 0.0] } else { [10.0, 10.0] };
            pts.push(
                c.iter()
                    .map(|m| m + 0.5 * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
            truth.push(b);
        }
        (pts, truth)
    }

    #[test]
    fn single_slice_is_mean() {
        let (pts, _) = blobs(200, 1);
        let a = kmeans_slices(&pts, 1, 0, 10).unwrap();
        assert!(a.labels.iter().all(|l| *l == 0));
        for d in 0..2 {
            let mean = pts.iter().map(|p| p[d]).sum::<f64>() / pts.len() as f64;
            assert!((a.centroids[0][d] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn separated_blobs_recovered() {
        let (pts, truth) = blobs(2000, 3);
        let a = kmeans_slices(&pts, 2, 7, 50).unwrap();
        let agree = a.labels.iter().zip(&truth).filter(|(x, y)| x == y).count();
        let acc = agree.max(pts.len() - agree) as f64 / pts.len() as f64;
        assert!(acc >= 0.99, "{acc}");
    }

    #[test]
    fn distinct_points_give_zero_objective() {
        let pts: Vec<Vec<f64>> = vec![vec![0.0], vec![1.0], vec![5.0], vec![1.0], vec![9.0]];
        let a = kmeans_slices(&pts, 4, 3, 20).unwrap();
        assert_eq!(*a.objective.last().unwrap(), 0.0);
    }

    #[test]
    fn objective_non_increasing_and_deterministic() {
        let (pts, _) = blobs(1000, 9);
        let a = kmeans_slices(&pts, 5, 11, 30).unwrap();
        for w in a.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
        let b = kmeans_slices(&pts, 5, 11, 30).unwrap();
        assert_eq!(a, b);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let c = pool.install(|| kmeans_slices(&pts, 5, 11, 30).unwrap());
        assert_eq!(a, c);
    }

    #[test]
    fn too_few_examples() {
        let pts = vec![vec![0.0]];
        assert!(matches!(
            kmeans_slices(&pts, 2, 0, 5),
            Err(StreamError::TooFewExamples { needed: 2, got: 1 })
        ));
    }
}
