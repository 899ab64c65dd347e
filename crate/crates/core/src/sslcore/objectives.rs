use privdistil_nn::{Graph, ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::losses::{pair_loss, LossBreakdown, LossKind};
use super::{Binding, Encoder, EncoderConfig, Projector, ProjectorConfig};
use crate::error::{Error, Result};

pub const PRIMARY_PREFIX: &str = "primary";
pub const PRIVILEGED_PREFIX: &str = "priv";

/// Encoder followed by its projection head.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub encoder: Encoder,
    pub projector: Projector,
}

impl Branch {
    pub fn new(encoder: EncoderConfig, projector: ProjectorConfig, prefix: &str) -> Result<Self> {
        let embed = encoder.embed_dim;
        Ok(Self {
            encoder: Encoder::new(encoder, format!("{prefix}.enc"))?,
            projector: Projector::new(projector, embed, format!("{prefix}.proj"))?,
        })
    }

    pub fn init(&self, rng: &mut ChaCha8Rng, store: &mut ParamStore<f32>) {
        self.encoder.init(rng, store);
        self.projector.init(rng, store);
    }

    /// Projections for an image batch already on the graph.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, bind: Binding, x: Var) -> Var {
        let h = self.encoder.forward(g, store, bind, x);
        self.projector.forward(g, store, bind, h)
    }
}

/// The primary branch (shared by both primary views) and, for privileged
/// methods, a separate privileged branch.
#[derive(Debug, Clone, PartialEq)]
pub struct SslModel {
    pub primary: Branch,
    pub privileged: Option<Branch>,
}

impl SslModel {
    pub fn new(primary: EncoderConfig, privileged: Option<EncoderConfig>, projector: ProjectorConfig) -> Result<Self> {
        Ok(Self {
            primary: Branch::new(primary, projector.clone(), PRIMARY_PREFIX)?,
            privileged: privileged.map(|c| Branch::new(c, projector, PRIVILEGED_PREFIX)).transpose()?,
        })
    }

    pub fn init(&self, seed: u64) -> ParamStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.primary.init(&mut rng, &mut store);
        if let Some(p) = &self.privileged {
            p.init(&mut rng, &mut store);
        }
        store
    }

    fn privileged_branch(&self) -> Result<&Branch> {
        self.privileged
            .as_ref()
            .ok_or_else(|| Error::Incompatible("method needs a privileged branch but the model has none".into()))
    }
}

/// Which branch processes the second Siamese input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiameseMode {
    /// Both inputs are primary views through the shared primary branch.
    Unprivileged,
    /// The second input is the privileged image through the privileged branch.
    Privileged,
}

/// Differentiable objective root plus its breakdown.
#[derive(Debug, Clone)]
pub struct Objective {
    pub root: Var,
    pub breakdown: LossBreakdown,
}

fn check_batches<T: Scalar>(batches: &[&Tensor<T>]) -> Result<()> {
    let n = batches[0].shape().first().copied().unwrap_or(0);
    for b in batches {
        if b.rank() != 4 || b.shape()[0] != n {
            return Err(Error::Shape(format!(
                "misaligned batches: {:?}",
                batches.iter().map(|b| b.shape().to_vec()).collect::<Vec<_>>()
            )));
        }
    }
    Ok(())
}

fn branch_input<T: Scalar>(g: &mut Graph<T>, branch: &Branch, batch: &Tensor<T>) -> Result<Var> {
    branch.encoder.check_input(batch.shape())?;
    Ok(g.input(batch.clone()))
}

/// Two-branch joint-embedding objective; row `i` of `a` pairs with row `i`
/// of `b`.
#[allow(clippy::too_many_arguments)]
pub fn siamese_objective<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    model: &SslModel,
    a: &Tensor<T>,
    b: &Tensor<T>,
    mode: SiameseMode,
    loss: &LossKind,
    bind: Binding,
) -> Result<Objective> {
    check_batches(&[a, b])?;
    let second = match mode {
        SiameseMode::Unprivileged => &model.primary,
        SiameseMode::Privileged => model.privileged_branch()?,
    };
    let xa = branch_input(g, &model.primary, a)?;
    let xb = branch_input(g, second, b)?;
    let za = model.primary.embed(g, store, bind, xa);
    let zb = second.embed(g, store, bind, xb);
    let label = match mode {
        SiameseMode::Unprivileged => "v1-v2",
        SiameseMode::Privileged => "v1-priv",
    };
    let (root, terms) = pair_loss(g, za, zb, loss, label)?;
    Ok(Objective { root, breakdown: LossBreakdown::from_pairs(vec![terms]) })
}

/// Three-branch objective: two primary views and the privileged view, with
/// the loss summed over the three pairs at equal weight.
#[allow(clippy::too_many_arguments)]
pub fn trident_objective<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    model: &SslModel,
    view1: &Tensor<T>,
    view2: &Tensor<T>,
    privileged: Option<&Tensor<T>>,
    loss: &LossKind,
    bind: Binding,
) -> Result<Objective> {
    let privileged = privileged.ok_or_else(|| Error::Incompatible("trident objective needs a privileged batch".into()))?;
    check_batches(&[view1, view2, privileged])?;
    let priv_branch = model.privileged_branch()?;
    let x1 = branch_input(g, &model.primary, view1)?;
    let x2 = branch_input(g, &model.primary, view2)?;
    let xp = branch_input(g, priv_branch, privileged)?;
    let z1 = model.primary.embed(g, store, bind, x1);
    let z2 = model.primary.embed(g, store, bind, x2);
    let zp = priv_branch.embed(g, store, bind, xp);
    let (l12, t12) = pair_loss(g, z1, z2, loss, "v1-v2")?;
    let (l1p, t1p) = pair_loss(g, z1, zp, loss, "v1-priv")?;
    let (l2p, t2p) = pair_loss(g, z2, zp, loss, "v2-priv")?;
    let s = g.add(l12, l1p);
    let root = g.add(s, l2p);
    Ok(Objective { root, breakdown: LossBreakdown::from_pairs(vec![t12, t1p, t2p]) })
}
