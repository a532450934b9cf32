use std::collections::HashSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{squared_distance, ClusterError};
use crate::score_bridge::QuestionEmbedding;

pub const MAX_ITERATIONS: usize = 300;
pub const DEFAULT_RESTARTS: usize = 10;

/// Result of one k-means fit over anonymous points.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after every assignment step of the winning restart.
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub item_ids: Vec<String>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub points: Vec<Vec<f64>>,
}

impl ClusterModel {
    pub fn cluster_of(&self, item_id: &str) -> Option<usize> {
        self.item_ids.iter().position(|id| id == item_id).map(|i| self.assignment[i])
    }

    /// Indices of items assigned to `cluster`.
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == cluster).collect()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }
}

pub(crate) fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn distinct_count(points: &[Vec<f64>]) -> usize {
    points
        .iter()
        .map(|p| p.iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        .collect::<HashSet<_>>()
        .len()
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| squared_distance(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut chosen = None;
        for (i, &d) in dist.iter().enumerate() {
            if d > 0.0 {
                chosen = Some(i);
                if target < d {
                    break;
                }
                target -= d;
            }
        }
        let next = points[chosen.expect("enough distinct points")].clone();
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &next));
        }
        centroids.push(next);
    }
    centroids
}

/// Runs Lloyd iterations from `centroids` until the assignment is a fixed point.
pub(crate) fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> KMeansFit {
    let k = centroids.len();
    let dim = points[0].len();
    let mut assignment: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        let mut inertia = 0.0;
        let next: Vec<usize> = points
            .iter()
            .map(|p| {
                let (j, d) = nearest(p, &centroids);
                inertia += d;
                j
            })
            .collect();
        trace.push(inertia);
        let converged = next == assignment;
        assignment = next;
        if converged || iterations == MAX_ITERATIONS {
            return KMeansFit { centroids, assignment, inertia, iterations, trace };
        }
        iterations += 1;

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        // Empty clusters take the point farthest from its current centroid.
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..points.len())
                    .map(|i| (i, nearest(&points[i], &centroids).1))
                    .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
                centroids[j] = points[far.0].clone();
            }
        }
    }
}

fn check_input(points: &[Vec<f64>], k: usize) -> Result<(), ClusterError> {
    if points.is_empty() {
        return Err(ClusterError::EmptyInput);
    }
    if k == 0 {
        return Err(ClusterError::ZeroClusters);
    }
    let dim = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(ClusterError::Dimension { expected: dim, found: p.len() });
    }
    if points.iter().flatten().any(|x| !x.is_finite()) {
        return Err(ClusterError::NonFinite);
    }
    let distinct = distinct_count(points);
    if k > distinct {
        return Err(ClusterError::TooFewPoints { k, distinct });
    }
    Ok(())
}

/// k-means++ seeded Lloyd with restarts; returns the minimal-inertia fit.
/// Equal inertias keep the earliest restart.
pub fn kmeans_points(points: &[Vec<f64>], k: usize, seed: u64, restarts: usize) -> Result<KMeansFit, ClusterError> {
    check_input(points, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansFit> = None;
    for _ in 0..restarts.max(1) {
        let init = plus_plus_init(points, k, &mut rng);
        let fit = lloyd(points, init);
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

pub fn kmeans(embeddings: &[QuestionEmbedding], k: usize, seed: u64, restarts: usize) -> Result<ClusterModel, ClusterError> {
    let points: Vec<Vec<f64>> = embeddings.iter().map(|e| e.vector.clone()).collect();
    let fit = kmeans_points(&points, k, seed, restarts)?;
    Ok(ClusterModel {
        k,
        centroids: fit.centroids,
        item_ids: embeddings.iter().map(|e| e.item_id.clone()).collect(),
        assignment: fit.assignment,
        inertia: fit.inertia,
        seed,
        points,
    })
}

/// Member of `cluster` closest to its centroid; ties go to the smaller item id.
pub fn nearest_to_centroid(model: &ClusterModel, cluster: usize) -> Result<&str, ClusterError> {
    nearest_member(model, cluster, |_| true)
}

pub(crate) fn nearest_member(
    model: &ClusterModel,
    cluster: usize,
    eligible: impl Fn(&str) -> bool,
) -> Result<&str, ClusterError> {
    if cluster >= model.k {
        return Err(ClusterError::InvalidCluster { cluster, k: model.k });
    }
    if model.points.len() != model.item_ids.len() {
        return Err(ClusterError::MissingPoints);
    }
    let centroid = &model.centroids[cluster];
    model
        .members(cluster)
        .into_iter()
        .filter(|&i| eligible(&model.item_ids[i]))
        .map(|i| (squared_distance(&model.points[i], centroid), model.item_ids[i].as_str()))
        .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)))
        .map(|(_, id)| id)
        .ok_or(ClusterError::EmptyCluster(cluster))
}
