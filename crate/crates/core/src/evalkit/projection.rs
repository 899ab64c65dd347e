use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::Embeddings;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection2D {
    pub coords: Vec<[f64; 2]>,
    pub method: String,
    pub labels: Vec<usize>,
}

/// Principal-component projection onto the two leading axes. Eigenvector
/// signs are fixed so each axis's largest-magnitude loading is positive.
pub fn project_2d(data: &Embeddings) -> Result<Projection2D> {
    let (n, d) = (data.len(), data.dim());
    if n < 3 {
        return Err(Error::Config(format!("projection needs at least 3 points, got {n}")));
    }
    let mut mean = vec![0.0; d];
    for r in &data.rows {
        for j in 0..d {
            mean[j] += r[j] / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, j| data.rows[i][j] - mean[j]);
    if centered.iter().all(|v| *v == 0.0) {
        return Err(Error::Degenerate("embedding matrix has rank 0".into()));
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0).max(1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axes: Vec<Vec<f64>> = (0..2)
        .map(|a| {
            if a >= d {
                return vec![0.0; d];
            }
            let v = eig.eigenvectors.column(order[a]);
            let pivot = (0..d).fold(0, |b, j| if v[j].abs() > v[b].abs() { j } else { b });
            let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
            (0..d).map(|j| sign * v[j]).collect()
        })
        .collect();
    let coords = (0..n)
        .map(|i| {
            let p = |a: usize| (0..d).map(|j| centered[(i, j)] * axes[a][j]).sum::<f64>();
            [p(0), p(1)]
        })
        .collect();
    Ok(Projection2D { coords, method: "pca".into(), labels: data.labels.clone() })
}

/// Mean silhouette coefficient of labelled 2-D points.
pub fn silhouette_score(coords: &[[f64; 2]], labels: &[usize]) -> Result<f64> {
    if coords.len() != labels.len() || coords.len() < 2 {
        return Err(Error::Shape("silhouette needs at least two labelled points".into()));
    }
    let k = labels.iter().max().unwrap() + 1;
    let dist = |a: &[f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut total = 0.0;
    for (i, p) in coords.iter().enumerate() {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (j, q) in coords.iter().enumerate() {
            if i != j {
                sums[labels[j]] += dist(p, q);
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..k).filter(|&c| c != own && counts[c] > 0).map(|c| sums[c] / counts[c] as f64).fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            total += (b - a) / a.max(b).max(f64::MIN_POSITIVE);
        }
    }
    Ok(total / coords.len() as f64)
}
