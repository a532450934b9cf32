use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::ClusterError;

/// Two-component projection of mean-centered data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    pub item_ids: Vec<String>,
    pub coords: Vec<[f64; 2]>,
    pub explained_variance_ratio: [f64; 2],
    pub mean: Vec<f64>,
    /// Unit principal axes, each with its largest-magnitude entry positive.
    pub components: [Vec<f64>; 2],
    /// Eigenvalues of the scatter matrix `XᵀX` of the centered data, descending.
    pub eigenvalues: Vec<f64>,
}

impl PcaProjection {
    pub fn to_jsonl(&self, clusters: Option<&[usize]>) -> String {
        let mut out = String::new();
        for (i, (id, c)) in self.item_ids.iter().zip(&self.coords).enumerate() {
            let mut record = serde_json::json!({ "id": id, "x": c[0], "y": c[1] });
            if let Some(clusters) = clusters {
                record["cluster"] = clusters[i].into();
            }
            out.push_str(&record.to_string());
            out.push('\n');
        }
        out
    }
}

fn fix_sign(v: &mut [f64]) {
    let mut pivot = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[pivot].abs() {
            pivot = i;
        }
    }
    if v[pivot] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Projects `points` onto their top two principal axes.
///
/// Uses the `d × d` scatter matrix when `d <= n` and the `n × n` Gram matrix otherwise.
pub fn pca_project(item_ids: &[String], points: &[Vec<f64>]) -> Result<PcaProjection, ClusterError> {
    let n = points.len();
    if n < 2 {
        return Err(ClusterError::Degenerate("need at least two points".into()));
    }
    let d = points[0].len();
    if d < 2 {
        return Err(ClusterError::Degenerate("need dimension at least two".into()));
    }
    if let Some(p) = points.iter().find(|p| p.len() != d) {
        return Err(ClusterError::Dimension { expected: d, found: p.len() });
    }
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);

    let (mut eigenvalues, axes): (Vec<f64>, Vec<Vec<f64>>) = if d <= n {
        let scatter = x.transpose() * &x;
        let eig = SymmetricEigen::new(scatter);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let values = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let axes = order[..2].iter().map(|&i| eig.eigenvectors.column(i).iter().copied().collect()).collect();
        (values, axes)
    } else {
        let gram = &x * x.transpose();
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let axes = order[..2]
            .iter()
            .map(|&i| {
                let v = x.transpose() * eig.eigenvectors.column(i);
                let norm = v.norm();
                if norm > 0.0 {
                    v.iter().map(|c| c / norm).collect()
                } else {
                    vec![0.0; d]
                }
            })
            .collect();
        (values, axes)
    };
    let total: f64 = eigenvalues.iter().sum();
    if total <= f64::EPSILON * n as f64 * mean.iter().map(|m| m * m).sum::<f64>().max(1.0) {
        return Err(ClusterError::Degenerate("all points are identical".into()));
    }
    // Rank-1 data: the second axis carries no variance and is arbitrary.
    let mut axes = axes;
    if eigenvalues[1] <= total * 1e-12 {
        eigenvalues[1] = 0.0;
    }
    for axis in axes.iter_mut() {
        fix_sign(axis);
    }
    let coords = (0..n)
        .map(|i| {
            let row = x.row(i);
            let project = |axis: &[f64]| row.iter().zip(axis).map(|(a, b)| a * b).sum::<f64>();
            [project(&axes[0]), project(&axes[1])]
        })
        .collect();
    let second = axes.pop().expect("two axes");
    let first = axes.pop().expect("two axes");
    Ok(PcaProjection {
        item_ids: item_ids.to_vec(),
        coords,
        explained_variance_ratio: [eigenvalues[0] / total, eigenvalues[1] / total],
        mean,
        components: [first, second],
        eigenvalues,
    })
}
