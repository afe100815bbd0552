//! Lloyd's k-means with k-means++ seeding.

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::{squared_distance, Matrix};
use crate::seed::{self, stream};

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Matrix,
    /// Cluster index of each row.
    pub assignment: Vec<usize>,
    /// Inertia after each assignment step.
    pub inertia_trace: Vec<f64>,
}

impl ClusterModel {
    pub fn inertia(&self) -> f64 {
        self.inertia_trace.last().copied().unwrap_or(0.0)
    }

    pub fn members(&self, cluster: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignment
            .iter()
            .enumerate()
            .filter(move |&(_, &c)| c == cluster)
            .map(|(i, _)| i)
    }
}

fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.iter_rows().enumerate() {
        let d = squared_distance(point, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init<R: Rng>(data: &Matrix, k: usize, rng: &mut R) -> Matrix {
    let n = data.rows();
    let mut chosen = vec![false; n];
    let mut centroids = Matrix::zeros(k, data.cols());
    let first = rng.random_range(0..n);
    chosen[first] = true;
    centroids.set_row(0, data.row(first));
    let mut dist: Vec<f64> = data
        .iter_rows()
        .map(|r| squared_distance(r, data.row(first)))
        .collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in dist.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                target -= d;
                if target <= 0.0 {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave target marginally positive
            pick.unwrap_or_else(|| dist.iter().rposition(|&d| d > 0.0).expect("positive mass"))
        } else {
            // every remaining point coincides with a centroid
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centroids.set_row(c, data.row(pick));
        for (i, row) in data.iter_rows().enumerate() {
            dist[i] = dist[i].min(squared_distance(row, data.row(pick)));
        }
    }
    centroids
}

/// Clusters the rows of `data` into `k` groups.
///
/// Stops when an assignment step changes nothing or after `max_iters` steps.
/// A cluster left empty by an update is re-seeded at the point farthest from
/// its current centroid.
pub fn kmeans_fit(data: &Matrix, k: usize, max_iters: usize, seed: u64) -> Result<ClusterModel> {
    let n = data.rows();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k={k} must be in 1..={n}")));
    }
    let mut rng = seed::rng(seed, &[stream::KMEANS]);
    let mut centroids = plus_plus_init(data, k, &mut rng);
    let mut assignment = vec![usize::MAX; n];
    let mut inertia_trace = Vec::new();
    let d = data.cols();

    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        let mut inertia = 0.0;
        let mut dists = vec![0.0; n];
        for (i, row) in data.iter_rows().enumerate() {
            let (c, dist) = nearest(row, &centroids);
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
            dists[i] = dist;
            inertia += dist;
        }
        inertia_trace.push(inertia);
        if !changed {
            break;
        }

        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, row) in data.iter_rows().enumerate() {
            let c = assignment[i];
            counts[c] += 1;
            for (s, v) in sums.row_mut(c).iter_mut().zip(row) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                let mean: Vec<f64> = sums.row(c).iter().map(|s| s * inv).collect();
                centroids.set_row(c, &mean);
            }
        }
        for c in (0..k).filter(|&c| counts[c] == 0) {
            let far = dists
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .expect("n > 0");
            centroids.set_row(c, data.row(far));
            dists[far] = 0.0;
        }
    }

    Ok(ClusterModel {
        k,
        centroids,
        assignment,
        inertia_trace,
    })
}
