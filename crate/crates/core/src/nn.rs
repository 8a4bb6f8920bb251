//! Parameterized layers built on [`Session`].

use crate::autodiff::Var;
use crate::math::sqrt;
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::Tensor;
use crate::{Result, Rng};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// `y = x Wᵀ + b` with `W` stored `[out, in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        std: f64,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), &[out_dim, in_dim], std, rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// He-style initialization for a layer feeding a ReLU.
    pub fn he(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        Self::new(store, name, in_dim, out_dim, true, sqrt(2.0 / in_dim as f64), rng)
    }

    /// Variance-preserving initialization for a linear output.
    pub fn lecun(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        Self::new(store, name, in_dim, out_dim, true, sqrt(1.0 / in_dim as f64), rng)
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let y = s.graph.matmul_nt(x, w)?;
        match self.bias {
            Some(b) => {
                let b = s.param(b);
                s.graph.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.weight];
        v.extend(self.bias);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (g, b) = (s.param(self.gamma), s.param(self.beta));
        s.graph.layer_norm(x, g, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Residual feedforward block: `LN(x + FFN(x) + side)`, with
/// `FFN(x) = W2 ReLU(W1 x + b1) + b2`. `side` is where adapters attach.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfnBlock {
    pub up: Linear,
    pub down: Linear,
    pub norm: LayerNorm,
}

impl FfnBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        FfnBlock {
            up: Linear::he(store, &format!("{name}.ffn.up"), dim, hidden, rng),
            down: Linear::lecun(store, &format!("{name}.ffn.down"), hidden, dim, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
        }
    }

    /// The pretrained feedforward map alone.
    pub fn ffn(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.up.forward(s, x)?;
        let h = s.graph.relu(h);
        self.down.forward(s, h)
    }

    pub fn forward(&self, s: &mut Session, x: Var, side: Option<Var>) -> Result<Var> {
        let mut h = self.ffn(s, x)?;
        if let Some(side) = side {
            h = s.graph.add(h, side)?;
        }
        let r = s.graph.add(x, h)?;
        self.norm.forward(s, r)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.up.params();
        v.extend(self.down.params());
        v.extend(self.norm.params());
        v
    }
}
