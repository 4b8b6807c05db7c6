use rand::Rng;

use super::{init, Forward};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tensor, TensorResult, Var};
use crate::Result;

/// Affine map over the last axis: `x[.., din] . w[din, dout] + b[dout]`.
pub fn linear<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> TensorResult<Var<'t>> {
    x.matmul(w)?.add(b)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Truncated-normal (std 0.02) weights, zero bias.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.register(format!("{prefix}.weight"), init::trunc_normal([in_dim, out_dim], 0.02, rng))?;
        let bias = store.register(format!("{prefix}.bias"), Tensor::zeros([out_dim]))?;
        Ok(Linear { weight, bias, in_dim, out_dim })
    }

    pub fn forward<'t>(&self, f: &Forward<'_, 't>, x: Var<'t>) -> TensorResult<Var<'t>> {
        linear(x, f.param(self.weight), f.param(self.bias))
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-6;

    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.register(format!("{prefix}.weight"), Tensor::ones([dim]))?,
            beta: store.register(format!("{prefix}.bias"), Tensor::zeros([dim]))?,
            dim,
            eps: Self::DEFAULT_EPS,
        })
    }

    pub fn forward<'t>(&self, f: &Forward<'_, 't>, x: Var<'t>) -> TensorResult<Var<'t>> {
        x.layer_norm(f.param(self.gamma), f.param(self.beta), self.eps)
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim
    }
}
