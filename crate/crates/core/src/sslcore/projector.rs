use privdistil_nn::{kaiming_uniform, Graph, ParamStore, Scalar, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Binding;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorConfig {
    pub layers: usize,
    pub width: usize,
    /// Batch normalization before each hidden rectifier.
    pub batch_norm: bool,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self { layers: 3, width: 256, batch_norm: true }
    }
}

impl ProjectorConfig {
    pub fn validate(&self, input_dim: usize) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("projector needs at least one layer".into()));
        }
        if self.width * 4 < input_dim {
            return Err(Error::Config(format!("projector width {} < embed_dim/4 ({input_dim}/4)", self.width)));
        }
        Ok(())
    }
}

const BN_EPS: f64 = 1e-5;

/// Dense projection head: `(linear, norm, relu)` repeated, then a final
/// linear layer with nothing after it.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub config: ProjectorConfig,
    pub input_dim: usize,
    pub prefix: String,
}

impl Projector {
    pub fn new(config: ProjectorConfig, input_dim: usize, prefix: impl Into<String>) -> Result<Self> {
        config.validate(input_dim)?;
        Ok(Self { config, input_dim, prefix: prefix.into() })
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init(&self, rng: &mut ChaCha8Rng, store: &mut ParamStore<f32>) {
        let mut din = self.input_dim;
        for l in 0..self.config.layers {
            let w = self.config.width;
            store.insert(self.name(&format!("l{l}.w")), kaiming_uniform(rng, &[din, w], din));
            store.insert(self.name(&format!("l{l}.b")), Tensor::zeros([w]));
            if l + 1 < self.config.layers && self.config.batch_norm {
                store.insert(self.name(&format!("l{l}.bn.gamma")), Tensor::ones([w]));
                store.insert(self.name(&format!("l{l}.bn.beta")), Tensor::zeros([w]));
            }
            din = w;
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, bind: Binding, x: Var) -> Var {
        let mut h = x;
        for l in 0..self.config.layers {
            let w = bind.bind(g, store, &self.name(&format!("l{l}.w")));
            let b = bind.bind(g, store, &self.name(&format!("l{l}.b")));
            h = g.linear(h, w, Some(b));
            if l + 1 < self.config.layers {
                if self.config.batch_norm {
                    let gamma = bind.bind(g, store, &self.name(&format!("l{l}.bn.gamma")));
                    let beta = bind.bind(g, store, &self.name(&format!("l{l}.bn.beta")));
                    h = g.batch_norm(h, gamma, beta, T::from_f64_lossy(BN_EPS));
                }
                h = g.relu(h);
            }
        }
        h
    }

    /// Projects a representation batch `[N, input_dim]`. Normalization uses
    /// the statistics of this batch.
    pub fn project<T: Scalar>(&self, store: &ParamStore<T>, reps: &Tensor<T>) -> Result<Tensor<T>> {
        match reps.shape() {
            [n, d] if *n > 0 && *d == self.input_dim => {}
            other => return Err(Error::Shape(format!("projector expects [N>0, {}], got {other:?}", self.input_dim))),
        }
        let mut g = Graph::new();
        let x = g.input(reps.clone());
        let y = self.forward(&mut g, store, Binding::Frozen, x);
        Ok(g.value(y).clone())
    }
}
