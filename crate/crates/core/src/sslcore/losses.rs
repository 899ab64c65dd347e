//! Joint-embedding losses, built on the graph so they differentiate for free.
//!
//! VICReg follows the usual reference implementation: the invariance term is
//! the mean squared difference over all `N x D` entries, the variance hinge
//! is averaged over the two branches, and the covariance penalty (squared
//! off-diagonal covariance over `D`) is summed over the two branches.
//! Covariances use the unbiased `N - 1` normalizer.

use privdistil_nn::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossKind {
    Vicreg { inv_weight: f64, var_weight: f64, cov_weight: f64, gamma: f64, eps: f64 },
    Infonce { temperature: f64 },
}

impl LossKind {
    pub fn vicreg() -> Self {
        LossKind::Vicreg { inv_weight: 25.0, var_weight: 25.0, cov_weight: 1.0, gamma: 1.0, eps: 1e-4 }
    }

    pub fn infonce() -> Self {
        LossKind::Infonce { temperature: 0.1 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Vicreg { .. } => "vicreg",
            LossKind::Infonce { .. } => "infonce",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::Vicreg { inv_weight, var_weight, cov_weight, gamma, eps } => {
                if !(inv_weight >= 0.0 && var_weight >= 0.0 && cov_weight >= 0.0) {
                    return Err(Error::Config("vicreg weights must be non-negative".into()));
                }
                // eps = 0 is accepted for evaluation; training with it is
                // undefined once a dimension collapses.
                if !(gamma > 0.0 && eps >= 0.0) {
                    return Err(Error::Config("vicreg gamma must be positive and eps non-negative".into()));
                }
            }
            LossKind::Infonce { temperature } => {
                if !(temperature > 0.0) {
                    return Err(Error::Config("infonce temperature must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

/// Projection batch `[N, D]` tagged with the branch that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub z: Tensor<f64>,
    pub branch: String,
}

impl EmbeddingBatch {
    pub fn new(z: Tensor<f64>, branch: impl Into<String>) -> Result<Self> {
        if z.rank() != 2 {
            return Err(Error::Shape(format!("embedding batch must be [N, D], got {:?}", z.shape())));
        }
        if !z.all_finite() {
            return Err(Error::Degenerate("non-finite embedding".into()));
        }
        Ok(Self { z, branch: branch.into() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossComponents {
    Vicreg { invariance: f64, variance: f64, covariance: f64 },
    Infonce { a_to_b: f64, b_to_a: f64 },
    CrossEntropy { value: f64 },
}

/// Loss of one branch pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTerms {
    pub label: String,
    pub total: f64,
    pub components: LossComponents,
}

impl PairTerms {
    /// The documented weighted sum of the components.
    pub fn recompose(&self, kind: Option<&LossKind>) -> f64 {
        match (self.components, kind) {
            (LossComponents::Vicreg { invariance, variance, covariance }, Some(LossKind::Vicreg { inv_weight, var_weight, cov_weight, .. })) => {
                inv_weight * invariance + var_weight * variance + cov_weight * covariance
            }
            (LossComponents::Infonce { a_to_b, b_to_a }, _) => 0.5 * (a_to_b + b_to_a),
            (LossComponents::CrossEntropy { value }, _) => value,
            (LossComponents::Vicreg { .. }, _) => f64::NAN,
        }
    }
}

/// Total objective with its per-pair terms. The total is the unweighted sum
/// of the pair totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub pairs: Vec<PairTerms>,
}

impl LossBreakdown {
    pub fn from_pairs(pairs: Vec<PairTerms>) -> Self {
        Self { total: pairs.iter().map(|p| p.total).sum(), pairs }
    }

    pub fn recompose(&self, kind: Option<&LossKind>) -> f64 {
        self.pairs.iter().map(|p| p.recompose(kind)).sum()
    }

    pub fn pair(&self, label: &str) -> Option<&PairTerms> {
        self.pairs.iter().find(|p| p.label == label)
    }
}

fn check_pair<T: Scalar>(g: &Graph<T>, za: Var, zb: Var) -> Result<(usize, usize)> {
    let (sa, sb) = (g.shape(za), g.shape(zb));
    if sa.len() != 2 || sa != sb {
        return Err(Error::Shape(format!("embedding shapes {sa:?} and {sb:?}")));
    }
    if sa[0] < 2 {
        return Err(Error::Shape(format!("need at least 2 rows, got {}", sa[0])));
    }
    Ok((sa[0], sa[1]))
}

fn read<T: Scalar>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).item().as_f64()
}

/// Mean-centered copy of `z` and its unbiased per-dimension variance.
fn centered<T: Scalar>(g: &mut Graph<T>, z: Var, n: usize) -> (Var, Var) {
    let sums = g.sum_cols(z);
    let mean = g.scale(sums, T::from_f64_lossy(1.0 / n as f64));
    let mean_rows = g.broadcast_rows(mean, n);
    let zc = g.sub(z, mean_rows);
    let sq = g.square(zc);
    let ss = g.sum_cols(sq);
    let var = g.scale(ss, T::from_f64_lossy(1.0 / (n as f64 - 1.0)));
    (zc, var)
}

fn variance_hinge<T: Scalar>(g: &mut Graph<T>, var: Var, gamma: f64, eps: f64) -> Var {
    let shifted = g.add_scalar(var, T::from_f64_lossy(eps));
    let std = g.sqrt(shifted);
    let neg = g.scale(std, -T::one());
    let gap = g.add_scalar(neg, T::from_f64_lossy(gamma));
    let hinge = g.relu(gap);
    g.mean_all(hinge)
}

fn covariance_penalty<T: Scalar>(g: &mut Graph<T>, zc: Var, var: Var, n: usize, d: usize) -> Var {
    let zt = g.transpose(zc);
    let prod = g.matmul(zt, zc);
    let cov = g.scale(prod, T::from_f64_lossy(1.0 / (n as f64 - 1.0)));
    let cov_sq = g.square(cov);
    let all = g.sum_all(cov_sq);
    let var_sq = g.square(var);
    let diag = g.sum_all(var_sq);
    let off = g.sub(all, diag);
    g.scale(off, T::from_f64_lossy(1.0 / d as f64))
}

fn vicreg_graph<T: Scalar>(
    g: &mut Graph<T>,
    za: Var,
    zb: Var,
    weights: (f64, f64, f64),
    gamma: f64,
    eps: f64,
) -> Result<(Var, LossComponents)> {
    let (n, d) = check_pair(g, za, zb)?;
    let diff = g.sub(za, zb);
    let sq = g.square(diff);
    let inv = g.mean_all(sq);
    let (zca, var_a) = centered(g, za, n);
    let (zcb, var_b) = centered(g, zb, n);
    let ha = variance_hinge(g, var_a, gamma, eps);
    let hb = variance_hinge(g, var_b, gamma, eps);
    let hsum = g.add(ha, hb);
    let var_term = g.scale(hsum, T::from_f64_lossy(0.5));
    let ca = covariance_penalty(g, zca, var_a, n, d);
    let cb = covariance_penalty(g, zcb, var_b, n, d);
    let cov_term = g.add(ca, cb);
    let (lw, mw, nw) = weights;
    let t1 = g.scale(inv, T::from_f64_lossy(lw));
    let t2 = g.scale(var_term, T::from_f64_lossy(mw));
    let t3 = g.scale(cov_term, T::from_f64_lossy(nw));
    let s = g.add(t1, t2);
    let total = g.add(s, t3);
    let comps = LossComponents::Vicreg {
        invariance: read(g, inv),
        variance: read(g, var_term),
        covariance: read(g, cov_term),
    };
    Ok((total, comps))
}

fn l2_normalize_rows<T: Scalar>(g: &mut Graph<T>, z: Var) -> Result<Var> {
    let (_, d) = g.value(z).dims2();
    let sq = g.square(z);
    let ss = g.sum_rows(sq);
    if g.value(ss).data().iter().any(|&v| !(v.as_f64() > 0.0)) {
        return Err(Error::Degenerate("zero-norm embedding row (cosine similarity undefined)".into()));
    }
    let norm = g.sqrt(ss);
    let nb = g.broadcast_cols(norm, d);
    Ok(g.div(z, nb))
}

fn mean_nll<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[usize]) -> Var {
    let ls = g.log_softmax_rows(logits);
    let picked = g.pick(ls, targets);
    let m = g.mean_all(picked);
    g.scale(m, -T::one())
}

fn infonce_graph<T: Scalar>(g: &mut Graph<T>, za: Var, zb: Var, temperature: f64) -> Result<(Var, LossComponents)> {
    let (n, _) = check_pair(g, za, zb)?;
    let na = l2_normalize_rows(g, za)?;
    let nb = l2_normalize_rows(g, zb)?;
    let nbt = g.transpose(nb);
    let sim = g.matmul(na, nbt);
    let logits = g.scale(sim, T::from_f64_lossy(1.0 / temperature));
    let targets: Vec<usize> = (0..n).collect();
    let ab = mean_nll(g, logits, &targets);
    let logits_t = g.transpose(logits);
    let ba = mean_nll(g, logits_t, &targets);
    let s = g.add(ab, ba);
    let total = g.scale(s, T::from_f64_lossy(0.5));
    let comps = LossComponents::Infonce { a_to_b: read(g, ab), b_to_a: read(g, ba) };
    Ok((total, comps))
}

/// Pair loss on graph nodes; returns the differentiable total and its terms.
pub fn pair_loss<T: Scalar>(g: &mut Graph<T>, za: Var, zb: Var, kind: &LossKind, label: &str) -> Result<(Var, PairTerms)> {
    kind.validate()?;
    let (total, components) = match *kind {
        LossKind::Vicreg { inv_weight, var_weight, cov_weight, gamma, eps } => {
            vicreg_graph(g, za, zb, (inv_weight, var_weight, cov_weight), gamma, eps)?
        }
        LossKind::Infonce { temperature } => infonce_graph(g, za, zb, temperature)?,
    };
    let terms = PairTerms { label: label.to_string(), total: read(g, total), components };
    Ok((total, terms))
}

/// Mean softmax cross-entropy of `logits: [N, K]` against `labels`.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<(Var, PairTerms)> {
    let (n, k) = g.value(logits).dims2();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} logits", labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Config(format!("label {l} out of range for {k} classes")));
    }
    let total = mean_nll(g, logits, labels);
    let value = read(g, total);
    Ok((total, PairTerms { label: "ce".into(), total: value, components: LossComponents::CrossEntropy { value } }))
}

fn evaluate(za: &EmbeddingBatch, zb: &EmbeddingBatch, kind: &LossKind) -> Result<LossBreakdown> {
    let mut g = Graph::<f64>::new();
    let a = g.input(za.z.clone());
    let b = g.input(zb.z.clone());
    let label = format!("{}-{}", za.branch, zb.branch);
    let (_, terms) = pair_loss(&mut g, a, b, kind, &label)?;
    Ok(LossBreakdown::from_pairs(vec![terms]))
}

/// VICReg loss of two aligned batches.
pub fn vicreg_loss(za: &EmbeddingBatch, zb: &EmbeddingBatch, kind: &LossKind) -> Result<LossBreakdown> {
    if !matches!(kind, LossKind::Vicreg { .. }) {
        return Err(Error::Config("vicreg_loss called with a non-VICReg loss kind".into()));
    }
    evaluate(za, zb, kind)
}

/// Symmetric InfoNCE of two aligned batches.
pub fn infonce_loss(za: &EmbeddingBatch, zb: &EmbeddingBatch, kind: &LossKind) -> Result<LossBreakdown> {
    if !matches!(kind, LossKind::Infonce { .. }) {
        return Err(Error::Config("infonce_loss called with a non-InfoNCE loss kind".into()));
    }
    evaluate(za, zb, kind)
}
