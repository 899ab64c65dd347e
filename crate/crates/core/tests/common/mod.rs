//! Loop-based reference implementations used as test oracles.
#![allow(dead_code)]

pub struct VicregRef {
    pub invariance: f64,
    pub variance: f64,
    pub covariance: f64,
}

fn column_stats(z: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = z.len();
    let d = z[0].len();
    let mut mean = vec![0.0; d];
    for row in z {
        for j in 0..d {
            mean[j] += row[j] / n as f64;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for j in 0..d {
        for k in 0..d {
            let mut s = 0.0;
            for row in z {
                s += (row[j] - mean[j]) * (row[k] - mean[k]);
            }
            cov[j][k] = s / (n as f64 - 1.0);
        }
    }
    (mean, cov)
}

pub fn vicreg_ref(a: &[Vec<f64>], b: &[Vec<f64>], gamma: f64, eps: f64) -> VicregRef {
    let n = a.len();
    let d = a[0].len();
    let mut inv = 0.0;
    for i in 0..n {
        for j in 0..d {
            inv += (a[i][j] - b[i][j]).powi(2);
        }
    }
    inv /= (n * d) as f64;
    let mut variance = 0.0;
    let mut covariance = 0.0;
    for z in [a, b] {
        let (_, cov) = column_stats(z);
        let mut hinge = 0.0;
        for j in 0..d {
            hinge += (gamma - (cov[j][j] + eps).sqrt()).max(0.0);
        }
        variance += 0.5 * hinge / d as f64;
        let mut off = 0.0;
        for j in 0..d {
            for k in 0..d {
                if j != k {
                    off += cov[j][k].powi(2);
                }
            }
        }
        covariance += off / d as f64;
    }
    VicregRef { invariance: inv, variance, covariance }
}

fn cosine(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
    let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (nx * ny)
}

/// `(a_to_b, b_to_a)` mean cross-entropies.
pub fn infonce_ref(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> (f64, f64) {
    let n = a.len();
    let direction = |x: &[Vec<f64>], y: &[Vec<f64>]| {
        let mut total = 0.0;
        for i in 0..n {
            let mut denom = 0.0;
            for j in 0..n {
                denom += (cosine(&x[i], &y[j]) / tau).exp();
            }
            let pos = (cosine(&x[i], &y[i]) / tau).exp();
            total += -(pos / denom).ln();
        }
        total / n as f64
    };
    (direction(a, b), direction(b, a))
}

pub fn rows(t: &privdistil_nn::Tensor<f64>) -> Vec<Vec<f64>> {
    let (_, d) = t.dims2();
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}
