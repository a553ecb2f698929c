//! Lloyd's k-means with k-means++ seeding, used to initialize the quantized
//! centers from the per-subset centers.

use super::CenterBank;
use crate::error::{Error, Result};
use crate::numerics::{sq_dist, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub bank: CenterBank,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the assigned center after every assignment step.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(0.0)
    }
}

pub fn kmeans_objective(points: &Matrix, centers: &Matrix) -> f64 {
    points
        .iter_rows()
        .map(|p| nearest(p, centers).1)
        .sum()
}

fn nearest(p: &[f64], centers: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter_rows().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn seed_plus_plus(points: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = points.rows();
    let mut centers = Matrix::zeros(k, points.cols());
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = points.iter_rows().map(|p| sq_dist(p, points.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
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
            rng.random_range(0..n)
        };
        centers.row_mut(c).copy_from_slice(points.row(pick));
        for (i, p) in points.iter_rows().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centers.row(c)));
        }
    }
    centers
}

/// Clusters the rows of `points` into `n_q` centers. Stops after `max_iters`
/// Lloyd iterations or once assignments no longer change. A cluster that
/// loses all its points is moved onto the point farthest from its center.
pub fn kmeans_init(points: &Matrix, n_q: usize, seed: u64, max_iters: usize) -> Result<KMeansResult> {
    let n = points.rows();
    if n_q == 0 || n < n_q {
        return Err(Error::TooFewPoints {
            needed: n_q.max(1),
            got: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = seed_plus_plus(points, n_q, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let mut changed = false;
        let mut dists = vec![0.0; n];
        for (i, p) in points.iter_rows().enumerate() {
            let (j, d) = nearest(p, &centers);
            changed |= assignments[i] != j;
            assignments[i] = j;
            dists[i] = d;
        }
        trace.push(dists.iter().sum());
        if !changed {
            converged = true;
            break;
        }

        let mut sums = Matrix::zeros(n_q, points.cols());
        let mut counts = vec![0usize; n_q];
        for (i, p) in points.iter_rows().enumerate() {
            counts[assignments[i]] += 1;
            for (s, v) in sums.row_mut(assignments[i]).iter_mut().zip(p) {
                *s += v;
            }
        }
        for (j, &count) in counts.iter().enumerate() {
            if count > 0 {
                let inv = 1.0 / count as f64;
                for (c, s) in centers.row_mut(j).iter_mut().zip(sums.row(j)) {
                    *c = s * inv;
                }
            }
        }
        for j in (0..n_q).filter(|&j| counts[j] == 0) {
            let far = (0..n)
                .max_by(|&a, &b| {
                    let da = sq_dist(points.row(a), centers.row(assignments[a]));
                    let db = sq_dist(points.row(b), centers.row(assignments[b]));
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .expect("n >= n_q > 0");
            let row = points.row(far).to_vec();
            centers.row_mut(j).copy_from_slice(&row);
            assignments[far] = j;
        }
    }

    if !converged {
        // centers moved after the last assignment; report against the final ones
        for (i, p) in points.iter_rows().enumerate() {
            assignments[i] = nearest(p, &centers).0;
        }
        trace.push(kmeans_objective(points, &centers));
    }

    Ok(KMeansResult {
        bank: CenterBank::quantized(centers),
        assignments,
        objective_trace: trace,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn identical_points_single_center() {
        let pts = Matrix::from_rows(&vec![[0.3, -0.7]; 6]).unwrap();
        let r = kmeans_init(&pts, 1, 0, 100).unwrap();
        assert_eq!(r.bank.centers.row(0), &[0.3, -0.7]);
        assert!(r.bank.quantized);
        assert_eq!(r.objective(), 0.0);
    }

    #[test]
    fn k_equals_n_is_exact() {
        let pts = Matrix::from_rows(&[[0.0, 1.0], [2.0, 0.5], [-1.0, 3.0], [4.0, 4.0]]).unwrap();
        let r = kmeans_init(&pts, 4, 3, 100).unwrap();
        assert_eq!(r.objective(), 0.0);
        for c in r.bank.centers.iter_rows() {
            assert!(pts.iter_rows().any(|p| p == c));
        }
    }

    #[test]
    fn too_few_points() {
        let pts = Matrix::zeros(2, 3);
        assert!(matches!(
            kmeans_init(&pts, 3, 0, 10),
            Err(Error::TooFewPoints { needed: 3, got: 2 })
        ));
    }

    #[test]
    fn objective_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let data: Vec<f64> = (0..300 * 4).map(|_| normal.sample(&mut rng)).collect();
        let pts = Matrix::from_vec(300, 4, data).unwrap();
        for seed in 0..5 {
            let r = kmeans_init(&pts, 7, seed, 100).unwrap();
            for w in r.objective_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{:?}", r.objective_trace);
            }
            assert!((r.objective() - kmeans_objective(&pts, &r.bank.centers)).abs() < 1e-9);
        }
    }
}
