use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Embeddings;
use crate::error::{Error, Result};

pub const MAX_MATCH_K: usize = 6;
pub const KMEANS_RESTARTS: usize = 10;
const MAX_ITERS: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub k: usize,
    pub assignment: Vec<usize>,
    pub accuracy: f64,
    /// `permutation[cluster]` is the label that cluster is matched to.
    pub permutation: Vec<usize>,
    pub inertia: f64,
    /// All points identical; accuracy is then the largest class prior.
    pub degenerate: bool,
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; k], &mut out);
    out
}

/// Best accuracy over all cluster-to-label permutations; ties go to the
/// first permutation in lexicographic order.
pub fn match_clusters(assignment: &[usize], labels: &[usize], k: usize) -> Result<(f64, Vec<usize>)> {
    if k == 0 || k > MAX_MATCH_K {
        return Err(Error::Config(format!("match_clusters supports 1 <= k <= {MAX_MATCH_K}, got {k}")));
    }
    if assignment.len() != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!("{} assignments for {} labels", assignment.len(), labels.len())));
    }
    if assignment.iter().chain(labels).any(|&v| v >= k) {
        return Err(Error::Config(format!("cluster or label index out of range for k = {k}")));
    }
    let mut counts = vec![vec![0usize; k]; k];
    for (&a, &l) in assignment.iter().zip(labels) {
        counts[a][l] += 1;
    }
    let mut best: Option<(usize, Vec<usize>)> = None;
    for p in permutations(k) {
        let hits: usize = (0..k).map(|c| counts[c][p[c]]).sum();
        if best.as_ref().is_none_or(|(b, _)| hits > *b) {
            best = Some((hits, p));
        }
    }
    let (hits, perm) = best.unwrap();
    Ok((hits as f64 / labels.len() as f64, perm))
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    centroids.iter().enumerate().map(|(i, c)| (i, dist2(x, c))).fold((0, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b })
}

/// Lloyd iterations from a farthest-point start; returns `(assignment, inertia)`.
fn lloyd(rows: &[Vec<f64>], k: usize, first: usize) -> (Vec<usize>, f64) {
    let mut centroids = vec![rows[first].clone()];
    while centroids.len() < k {
        let far = (0..rows.len())
            .map(|i| (i, nearest(&rows[i], &centroids).1))
            .fold((0, -1.0), |b, c| if c.1 > b.1 { c } else { b })
            .0;
        centroids.push(rows[far].clone());
    }
    let d = rows[0].len();
    let mut assignment = vec![usize::MAX; rows.len()];
    for _ in 0..MAX_ITERS {
        let next: Vec<usize> = rows.iter().map(|r| nearest(r, &centroids).0).collect();
        if next == assignment {
            break;
        }
        assignment = next;
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (r, &a) in rows.iter().zip(&assignment) {
            counts[a] += 1;
            for j in 0..d {
                sums[a][j] += r[j];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = rows.iter().zip(&assignment).map(|(r, &a)| dist2(r, &centroids[a])).sum();
    (assignment, inertia)
}

/// k-means with seeded farthest-point initialization and
/// [`KMEANS_RESTARTS`] restarts (lowest inertia wins), scored against the
/// labels with [`match_clusters`].
pub fn kmeans_eval(data: &Embeddings, k: usize, seed: u64) -> Result<ClusterResult> {
    if k < 2 {
        return Err(Error::Config(format!("k-means needs k >= 2, got {k}")));
    }
    if data.len() < k {
        return Err(Error::Config(format!("{} samples for k = {k}", data.len())));
    }
    let rows = &data.rows;
    if rows.iter().all(|r| r == &rows[0]) {
        let mut counts = vec![0usize; k];
        for &l in &data.labels {
            if l >= k {
                return Err(Error::Config(format!("label {l} out of range for k = {k}")));
            }
            counts[l] += 1;
        }
        let top = (0..k).fold(0, |b, c| if counts[c] > counts[b] { c } else { b });
        let assignment = vec![0; rows.len()];
        let mut permutation: Vec<usize> = (0..k).collect();
        permutation.swap(0, top);
        return Ok(ClusterResult {
            k,
            accuracy: counts[top] as f64 / rows.len() as f64,
            assignment,
            permutation,
            inertia: 0.0,
            degenerate: true,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let (assignment, inertia) = lloyd(rows, k, rng.random_range(0..rows.len()));
        if best.as_ref().is_none_or(|(_, b)| inertia < *b) {
            best = Some((assignment, inertia));
        }
    }
    let (assignment, inertia) = best.unwrap();
    let (accuracy, permutation) = match_clusters(&assignment, &data.labels, k)?;
    Ok(ClusterResult { k, assignment, accuracy, permutation, inertia, degenerate: false })
}
