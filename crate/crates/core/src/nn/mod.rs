//! Parameterised layers built from tensor ops.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`] and take the store by
//! reference on every forward call, so one store can be optimised, saved and
//! restored as a unit.

mod attention;
mod gru;

pub use attention::{causal_mask, scaled_dot_attention, MultiHeadAttention};
pub use gru::{gru_cell, Gru};

use crate::tensor::{ParamId, ParamStore, Result, SeededRng, Tensor};

/// `x·W + b` over the rows of `x`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut SeededRng, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let weight = store.xavier(format!("{name}.w"), in_dim, out_dim, rng);
        let bias = bias.then(|| store.zeros(format!("{name}.b"), &[out_dim]));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(store.get(self.weight))?;
        match self.bias {
            Some(b) => y.add_bias(store.get(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.ones(format!("{name}.gain"), &[dim]),
            bias: store.zeros(format!("{name}.bias"), &[dim]),
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(store.get(self.gain), store.get(self.bias))
    }
}

/// Position-wise two-layer GELU network.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut SeededRng, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}.up"), dim, hidden, true),
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, dim, true),
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        self.down.forward(store, &self.up.forward(store, x)?.gelu()?)
    }
}
