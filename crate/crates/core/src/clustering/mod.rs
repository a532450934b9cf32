//! Question clustering: k-means with k-means++ restarts, elbow selection of
//! k, and a two-component PCA projection for scatter plots.

mod elbow;
mod kmeans;
mod pca;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use elbow::{elbow_select, inertia_curve, InertiaCurve};
pub use kmeans::{kmeans, kmeans_points, nearest_to_centroid, ClusterModel, KMeansFit, DEFAULT_RESTARTS, MAX_ITERATIONS};
pub use pca::{pca_project, PcaProjection};

pub(crate) use kmeans::nearest_member;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("no points to cluster")]
    EmptyInput,
    #[error("k must be at least 1")]
    ZeroClusters,
    #[error("k = {k} exceeds the {distinct} distinct points")]
    TooFewPoints { k: usize, distinct: usize },
    #[error("point dimension {found} differs from {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("non-finite coordinate in input")]
    NonFinite,
    #[error("inertia curve has {0} points, need at least 3")]
    CurveTooShort(usize),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("cluster {cluster} out of range for k = {k}")]
    InvalidCluster { cluster: usize, k: usize },
    #[error("cluster {0} has no eligible members")]
    EmptyCluster(usize),
    #[error("cluster model carries no point coordinates")]
    MissingPoints,
}

/// Optional preprocessing of embeddings before clustering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    None,
    /// Scale each vector to unit length so Euclidean distance tracks cosine distance.
    Cosine,
}

impl std::str::FromStr for Normalization {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Normalization::None),
            "cosine" => Ok(Normalization::Cosine),
            other => Err(format!("unknown normalization `{other}`")),
        }
    }
}

impl Normalization {
    pub fn apply(self, points: &mut [Vec<f64>]) {
        if self == Normalization::Cosine {
            for p in points.iter_mut() {
                let norm = p.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    p.iter_mut().for_each(|x| *x /= norm);
                }
            }
        }
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score_bridge::QuestionEmbedding;
    use proptest::prelude::*;

    fn emb(id: &str, v: &[f64]) -> QuestionEmbedding {
        QuestionEmbedding { item_id: id.to_string(), vector: v.to_vec() }
    }

    #[test]
    fn k1_centroid_is_mean() {
        let pts = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 0.0]];
        let fit = kmeans_points(&pts, 1, 0, 3).unwrap();
        assert_eq!(fit.centroids[0], vec![3.0, 2.0]);
        // total variance (population) × N
        let expected: f64 = pts.iter().map(|p| squared_distance(p, &[3.0, 2.0])).sum();
        assert!((fit.inertia - expected).abs() < 1e-12);
    }

    #[test]
    fn two_obvious_clusters() {
        let e = [emb("a", &[0.0, 0.0]), emb("b", &[0.0, 1.0]), emb("c", &[10.0, 0.0]), emb("d", &[10.0, 1.0])];
        let m = kmeans(&e, 2, 42, 10).unwrap();
        assert_eq!(m.assignment[0], m.assignment[1]);
        assert_eq!(m.assignment[2], m.assignment[3]);
        assert_ne!(m.assignment[0], m.assignment[2]);
        let mut cents = m.centroids.clone();
        cents.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(cents, vec![vec![0.0, 0.5], vec![10.0, 0.5]]);
        assert!((m.inertia - 1.0).abs() < 1e-12);
    }

    #[test]
    fn input_errors() {
        assert_eq!(kmeans_points(&[], 1, 0, 1), Err(ClusterError::EmptyInput));
        let dup = vec![vec![1.0, 1.0]; 5];
        assert_eq!(kmeans_points(&dup, 2, 0, 1), Err(ClusterError::TooFewPoints { k: 2, distinct: 1 }));
        assert_eq!(kmeans_points(&dup, 0, 0, 1), Err(ClusterError::ZeroClusters));
    }

    #[test]
    fn elbow_examples() {
        assert_eq!(elbow_select(&InertiaCurve::from_values(&[100.0, 60.0, 25.0, 22.0, 20.0])), Ok(3));
        assert_eq!(elbow_select(&InertiaCurve::from_values(&[40.0, 30.0, 20.0, 10.0, 0.0])), Ok(2));
        assert_eq!(elbow_select(&InertiaCurve::from_values(&[1.0, 0.5])), Err(ClusterError::CurveTooShort(2)));
    }

    #[test]
    fn nearest_to_centroid_tie_breaks_by_id() {
        let e = [emb("b", &[2.0, 0.0]), emb("a", &[0.0, 0.0])];
        let m = kmeans(&e, 1, 0, 1).unwrap();
        assert_eq!(nearest_to_centroid(&m, 0), Ok("a"));
        assert_eq!(nearest_to_centroid(&m, 1), Err(ClusterError::InvalidCluster { cluster: 1, k: 1 }));
        let single = kmeans(&[emb("only", &[3.0, 3.0])], 1, 0, 1).unwrap();
        assert_eq!(nearest_to_centroid(&single, 0), Ok("only"));
    }

    #[test]
    fn pca_on_axis_aligned_data_recovers_coordinates() {
        let pts = vec![vec![-2.0, 0.0], vec![2.0, 0.0], vec![0.0, -1.0], vec![0.0, 1.0]];
        let ids: Vec<String> = (0..4).map(|i| i.to_string()).collect();
        let p = pca_project(&ids, &pts).unwrap();
        for (c, x) in p.coords.iter().zip(&pts) {
            assert!((c[0].abs() - x[0].abs()).abs() < 1e-12);
            assert!((c[1].abs() - x[1].abs()).abs() < 1e-12);
        }
        assert!(p.explained_variance_ratio[0] >= p.explained_variance_ratio[1]);
    }

    #[test]
    fn pca_rank_one_and_degenerate() {
        let ids: Vec<String> = (0..3).map(|i| i.to_string()).collect();
        let line = vec![vec![0.0, 0.0, 0.0], vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0]];
        let p = pca_project(&ids, &line).unwrap();
        assert_eq!(p.explained_variance_ratio[1], 0.0);
        assert!((p.explained_variance_ratio[0] - 1.0).abs() < 1e-12);
        let same = vec![vec![1.0, 1.0]; 3];
        assert!(matches!(pca_project(&ids, &same), Err(ClusterError::Degenerate(_))));
    }

    #[test]
    fn pca_gram_path_matches_scatter_path() {
        // 3 points in 5-D go through the Gram branch; the same points padded to 6 rows
        // with a duplicate of the mean do not change the spectrum.
        let pts = vec![
            vec![1.0, 0.5, -2.0, 3.0, 0.0],
            vec![0.0, 1.5, 1.0, -1.0, 2.0],
            vec![-1.0, -2.0, 1.0, -2.0, -2.0],
        ];
        let ids: Vec<String> = (0..3).map(|i| i.to_string()).collect();
        let gram = pca_project(&ids, &pts).unwrap();
        let mean: Vec<f64> = (0..5).map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / 3.0).collect();
        let mut padded = pts.clone();
        padded.extend(std::iter::repeat_n(mean, 3));
        let ids6: Vec<String> = (0..6).map(|i| i.to_string()).collect();
        let scatter = pca_project(&ids6, &padded).unwrap();
        for i in 0..3 {
            for c in 0..2 {
                assert!((gram.coords[i][c] - scatter.coords[i][c]).abs() < 1e-9);
            }
        }
    }

    fn cloud() -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 5..20)
    }

    proptest! {
        #[test]
        fn kmeans_is_self_consistent_and_monotone(pts in cloud(), k in 1usize..4, seed in any::<u64>()) {
            let fit = kmeans_points(&pts, k, seed, 3).unwrap();
            for (p, &a) in pts.iter().zip(&fit.assignment) {
                prop_assert_eq!(kmeans::nearest(p, &fit.centroids).0, a);
                prop_assert!(a < k);
            }
            for w in fit.trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9);
            }
            prop_assert!(fit.inertia >= 0.0);
            prop_assert_eq!(kmeans_points(&pts, k, seed, 3).unwrap(), fit);
        }

        #[test]
        fn inertia_curve_non_increasing(pts in cloud(), seed in any::<u64>()) {
            let curve = inertia_curve(&pts, 5, seed, 2).unwrap();
            for w in curve.points.windows(2) {
                prop_assert!(w[1].1 <= w[0].1 + 1e-9);
            }
        }

        #[test]
        fn elbow_scale_invariant(values in prop::collection::vec(0.0f64..1e4, 3..10), scale in 1e-3f64..1e3) {
            let a = InertiaCurve::from_values(&values);
            let scaled: Vec<f64> = values.iter().map(|v| v * scale).collect();
            prop_assert_eq!(elbow_select(&a), elbow_select(&InertiaCurve::from_values(&scaled)));
        }

        #[test]
        fn pca_translation_invariant(pts in cloud(), shift in prop::collection::vec(-100.0f64..100.0, 3)) {
            let ids: Vec<String> = (0..pts.len()).map(|i| i.to_string()).collect();
            let moved: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
            if let (Ok(a), Ok(b)) = (pca_project(&ids, &pts), pca_project(&ids, &moved)) {
                // near-degenerate spectra make the axis choice unstable
                prop_assume!(a.eigenvalues[0] - a.eigenvalues[1] > 1e-3 && a.eigenvalues[1] - a.eigenvalues[2] > 1e-3);
                for (ca, cb) in a.coords.iter().zip(&b.coords) {
                    prop_assert!((ca[0] - cb[0]).abs() < 1e-6 && (ca[1] - cb[1]).abs() < 1e-6);
                }
            }
        }
    }
}
