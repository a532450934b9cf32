use serde::{Deserialize, Serialize};

use super::kmeans::{kmeans_points, lloyd, nearest};
use super::ClusterError;

/// Inertia for k = 1..k_max, in increasing k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InertiaCurve {
    pub points: Vec<(usize, f64)>,
}

impl InertiaCurve {
    /// Curve over k = 1..=values.len().
    pub fn from_values(values: &[f64]) -> Self {
        InertiaCurve { points: values.iter().enumerate().map(|(i, &v)| (i + 1, v)).collect() }
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("k\tinertia\n");
        for (k, inertia) in &self.points {
            out.push_str(&format!("{k}\t{inertia}\n"));
        }
        out
    }
}

/// Fits k = 1..=k_max. Each k also tries a warm start from the k-1 solution
/// plus the farthest point, which keeps the curve non-increasing.
pub fn inertia_curve(points: &[Vec<f64>], k_max: usize, seed: u64, restarts: usize) -> Result<InertiaCurve, ClusterError> {
    let mut curve = Vec::with_capacity(k_max);
    let mut previous: Option<Vec<Vec<f64>>> = None;
    for k in 1..=k_max {
        let mut fit = kmeans_points(points, k, seed.wrapping_add(k as u64), restarts)?;
        if let Some(mut init) = previous.take() {
            let far = points
                .iter()
                .enumerate()
                .map(|(i, p)| (i, nearest(p, &init).1))
                .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            init.push(points[far.0].clone());
            let warm = lloyd(points, init);
            if warm.inertia < fit.inertia {
                fit = warm;
            }
        }
        curve.push((k, fit.inertia));
        previous = Some(fit.centroids);
    }
    Ok(InertiaCurve { points: curve })
}

/// Picks the k with the largest second difference
/// `inertia(k-1) - 2 inertia(k) + inertia(k+1)` over interior points.
/// Differences within a relative 1e-12 of each other count as ties, which go to the smaller k.
pub fn elbow_select(curve: &InertiaCurve) -> Result<usize, ClusterError> {
    let pts = &curve.points;
    if pts.len() < 3 {
        return Err(ClusterError::CurveTooShort(pts.len()));
    }
    let scale = pts.iter().map(|(_, v)| v.abs()).fold(0.0, f64::max);
    let eps = scale * 1e-12;
    let mut best: Option<(usize, f64)> = None;
    for w in pts.windows(3) {
        let second = w[0].1 - 2.0 * w[1].1 + w[2].1;
        if best.is_none_or(|(_, b)| second > b + eps) {
            best = Some((w[1].0, second));
        }
    }
    Ok(best.expect("at least one interior point").0)
}
