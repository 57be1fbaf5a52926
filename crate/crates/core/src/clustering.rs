//! K-means (Lloyd iterations from k-means++ seeding) over PCA features.
//!
//! Randomness comes from a ChaCha8 stream seeded with the caller's `u64`
//! seed, so a given (data, K, seed) always yields the same centroids. Each
//! fit runs several k-means++ starts from that stream and keeps the best.
//! Distances are squared Euclidean; ties go to the lowest cluster index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matrix_rows, Tensor};

pub const MAX_ITERATIONS: usize = 300;
pub const DEFAULT_CLUSTERS: usize = 64;
pub const DEFAULT_RESTARTS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KMeansModel {
    /// `K x k`
    #[serde(with = "matrix_rows")]
    pub centroids: Tensor,
    pub k: usize,
    /// Fit-set sum of squared distances to the assigned centroid.
    pub inertia: f64,
    pub iterations_run: usize,
    pub seed: u64,
}

/// Result of a fit together with the per-iteration inertia trace.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub model: KMeansModel,
    pub labels: Vec<usize>,
    /// Inertia after seeding, then after every Lloyd iteration.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Index and squared distance of the nearest centroid.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, sq_dist(point, &centroids[0]));
    for (j, c) in centroids.iter().enumerate().skip(1) {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign(features: &Tensor, centroids: &[Vec<f64>], labels: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (label, p) in labels.iter_mut().zip(features.row_iter()) {
        let (j, d) = nearest(p, centroids);
        *label = j;
        inertia += d;
    }
    inertia
}

fn plus_plus_init(features: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = features.rows();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![features.row(first).to_vec()];
    let mut d2: Vec<f64> = features.row_iter().map(|p| sq_dist(p, &centroids[0])).collect();

    while centroids.len() < k {
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
            // Rounding can leave `target` just above the final sum.
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("total > 0"))
        } else {
            // Fewer distinct points than clusters: take the next unused row.
            chosen.iter().position(|c| !c).unwrap_or(0)
        };
        chosen[pick] = true;
        let c = features.row(pick).to_vec();
        for (d, p) in d2.iter_mut().zip(features.row_iter()) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Fits `k` clusters to the rows of `features` with [`DEFAULT_RESTARTS`]
/// seeded starts.
pub fn kmeans_fit(features: &Tensor, k: usize, seed: u64) -> Result<KMeansModel> {
    kmeans_fit_traced(features, k, seed, DEFAULT_RESTARTS).map(|f| f.model)
}

/// Runs `restarts` k-means++ starts from one seeded stream and keeps the
/// run with the lowest inertia (the earliest on ties).
pub fn kmeans_fit_traced(features: &Tensor, k: usize, seed: u64, restarts: usize) -> Result<KMeansFit> {
    let (n, dim) = features.expect_matrix("k-means features")?;
    if k < 1 || k > n {
        return Err(Error::Parameter(format!(
            "cluster count {k} must be in [1, {n}] for {n} samples"
        )));
    }
    if restarts < 1 {
        return Err(Error::Parameter("k-means needs at least one start".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Run> = None;
    for _ in 0..restarts {
        let run = lloyd(features, plus_plus_init(features, k, &mut rng), dim);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let run = best.expect("at least one start");
    let flat: Vec<f64> = run.centroids.iter().flatten().copied().collect();
    Ok(KMeansFit {
        model: KMeansModel {
            centroids: Tensor::matrix(k, dim, flat)?,
            k,
            inertia: run.inertia,
            iterations_run: run.iterations,
            seed,
        },
        labels: run.labels,
        inertia_history: run.history,
    })
}

struct Run {
    centroids: Vec<Vec<f64>>,
    labels: Vec<usize>,
    inertia: f64,
    iterations: usize,
    history: Vec<f64>,
}

fn lloyd(features: &Tensor, mut centroids: Vec<Vec<f64>>, dim: usize) -> Run {
    let mut labels = vec![0usize; features.rows()];
    let mut inertia = assign(features, &centroids, &mut labels);
    let mut history = vec![inertia];
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        update_centroids(features, &mut labels, &mut centroids, dim);
        let mut next = labels.clone();
        inertia = assign(features, &centroids, &mut next);
        history.push(inertia);
        let unchanged = next == labels;
        labels = next;
        if unchanged {
            break;
        }
    }
    Run {
        centroids,
        labels,
        inertia,
        iterations,
        history,
    }
}

/// Moves every centroid to its cluster mean. A cluster left empty, or whose
/// centroid coincides with a lower-indexed one, is re-seeded at the point
/// farthest from its own centroid, and that point is relabeled so the next
/// assignment starts from the repaired partition.
fn update_centroids(features: &Tensor, labels: &mut [usize], centroids: &mut [Vec<f64>], dim: usize) {
    let k = centroids.len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in features.row_iter().zip(labels.iter()) {
        counts[l] += 1;
        for (s, &x) in sums[l].iter_mut().zip(p) {
            *s += x;
        }
    }
    for j in 0..k {
        if counts[j] > 0 {
            for (c, s) in centroids[j].iter_mut().zip(&sums[j]) {
                *c = s / counts[j] as f64;
            }
        }
    }
    for j in 0..k {
        let merged = (0..j).any(|i| counts[i] > 0 && max_abs_diff(&centroids[i], &centroids[j]) <= 1e-12);
        if counts[j] > 0 && !merged {
            continue;
        }
        let mut far: Option<(usize, f64)> = None;
        for (i, p) in features.row_iter().enumerate() {
            let l = labels[i];
            if counts[l] <= 1 {
                continue;
            }
            let d = sq_dist(p, &centroids[l]);
            if far.is_none_or(|(_, best)| d > best) {
                far = Some((i, d));
            }
        }
        if let Some((i, d)) = far {
            if d > 0.0 {
                counts[labels[i]] -= 1;
                labels[i] = j;
                counts[j] += 1;
                centroids[j] = features.row(i).to_vec();
            }
        }
    }
}

impl KMeansModel {
    pub fn feature_dim(&self) -> usize {
        self.centroids.shape()[1]
    }

    fn centroid_rows(&self) -> Vec<Vec<f64>> {
        self.centroids.to_rows()
    }

    /// Nearest-centroid label for each row.
    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        let (_, width) = features.expect_matrix("k-means features")?;
        if width != self.feature_dim() {
            return Err(Error::Contract(format!(
                "feature width {width} does not match centroid width {}",
                self.feature_dim()
            )));
        }
        let c = self.centroid_rows();
        let mut labels = vec![0; features.rows()];
        assign(features, &c, &mut labels);
        Ok(labels)
    }

    /// Sum of squared distances from each row to its nearest centroid.
    pub fn score(&self, features: &Tensor) -> Result<f64> {
        let labels = self.predict(features)?;
        let c = self.centroid_rows();
        Ok(features
            .row_iter()
            .zip(&labels)
            .map(|(p, &l)| sq_dist(p, &c[l]))
            .sum())
    }

    pub fn validate(&self) -> Result<()> {
        let (rows, _) = self.centroids.expect_matrix("clusters.centroids")?;
        if rows != self.k || self.k == 0 {
            return Err(Error::validation(
                "clusters.k",
                format!("k = {} but {rows} centroids are stored", self.k),
            ));
        }
        if !(self.inertia.is_finite() && self.inertia >= 0.0) {
            return Err(Error::validation("clusters.inertia", "must be finite and non-negative"));
        }
        Ok(())
    }
}

pub fn kmeans_predict(model: &KMeansModel, features: &Tensor) -> Result<Vec<usize>> {
    model.predict(features)
}
