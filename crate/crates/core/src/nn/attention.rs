use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{linear, Forward, Linear};
use crate::params::ParamStore;
use crate::tensor::{TensorError, TensorResult, Var};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub embed_dim: usize,
    pub num_heads: usize,
}

impl AttentionSpec {
    pub fn new(embed_dim: usize, num_heads: usize) -> TensorResult<Self> {
        let spec = AttentionSpec { embed_dim, num_heads };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> TensorResult<()> {
        if self.num_heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(TensorError::invalid(
                "attention",
                format!("embed dim {} not divisible into {} heads", self.embed_dim, self.num_heads),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }
}

/// Projection weights `[C, C]` and biases `[C]` of one attention layer.
#[derive(Clone, Copy)]
pub struct AttentionVars<'t> {
    pub wq: Var<'t>,
    pub bq: Var<'t>,
    pub wk: Var<'t>,
    pub bk: Var<'t>,
    pub wv: Var<'t>,
    pub bv: Var<'t>,
    pub wo: Var<'t>,
    pub bo: Var<'t>,
}

/// Runs attention and also returns the `[B, h, N, N]` weights, with
/// `on_probs` applied to the weights before they mix the values.
fn attend<'t>(
    x: Var<'t>,
    p: &AttentionVars<'t>,
    spec: &AttentionSpec,
    on_probs: impl FnOnce(Var<'t>) -> TensorResult<Var<'t>>,
) -> TensorResult<(Var<'t>, Var<'t>)> {
    spec.validate()?;
    let shape = x.shape();
    if shape.len() != 3 || shape[2] != spec.embed_dim {
        return Err(TensorError::ShapeMismatch { op: "attention", lhs: shape, rhs: vec![spec.embed_dim] });
    }
    let (b, n, c) = (shape[0], shape[1], shape[2]);
    let (h, hd) = (spec.num_heads, spec.head_dim());
    let heads = |v: Var<'t>| v.reshape([b, n, h, hd])?.permute(&[0, 2, 1, 3]);
    let q = heads(linear(x, p.wq, p.bq)?)?;
    let k_t = linear(x, p.wk, p.bk)?.reshape([b, n, h, hd])?.permute(&[0, 2, 3, 1])?;
    let v = heads(linear(x, p.wv, p.bv)?)?;
    let probs = q.matmul(k_t)?.scale(spec.scale()).softmax(3)?;
    let mixed = on_probs(probs)?.matmul(v)?;
    let merged = mixed.permute(&[0, 2, 1, 3])?.reshape([b, n, c])?;
    Ok((linear(merged, p.wo, p.bo)?, probs))
}

/// Multi-head scaled dot-product self-attention over `[B, N, C]` tokens:
/// per head `softmax(Q K^T / sqrt(head_dim)) V`, heads concatenated and
/// projected by `wo`.
pub fn multi_head_attention<'t>(x: Var<'t>, p: &AttentionVars<'t>, spec: &AttentionSpec) -> TensorResult<Var<'t>> {
    attend(x, p, spec, Ok).map(|(out, _)| out)
}

/// Same as [`multi_head_attention`], also returning the attention weights.
pub fn multi_head_attention_weights<'t>(
    x: Var<'t>,
    p: &AttentionVars<'t>,
    spec: &AttentionSpec,
) -> TensorResult<(Var<'t>, Var<'t>)> {
    attend(x, p, spec, Ok)
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub spec: AttentionSpec,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub dropout: f64,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        spec: AttentionSpec,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let c = spec.embed_dim;
        Ok(MultiHeadAttention {
            spec,
            q: Linear::new(store, &format!("{prefix}.q"), c, c, rng)?,
            k: Linear::new(store, &format!("{prefix}.k"), c, c, rng)?,
            v: Linear::new(store, &format!("{prefix}.v"), c, c, rng)?,
            proj: Linear::new(store, &format!("{prefix}.proj"), c, c, rng)?,
            dropout,
        })
    }

    pub fn vars<'t>(&self, f: &Forward<'_, 't>) -> AttentionVars<'t> {
        AttentionVars {
            wq: f.param(self.q.weight),
            bq: f.param(self.q.bias),
            wk: f.param(self.k.weight),
            bk: f.param(self.k.bias),
            wv: f.param(self.v.weight),
            bv: f.param(self.v.bias),
            wo: f.param(self.proj.weight),
            bo: f.param(self.proj.bias),
        }
    }

    pub fn forward<'t>(&self, f: &Forward<'_, 't>, x: Var<'t>) -> TensorResult<Var<'t>> {
        let out = attend(x, &self.vars(f), &self.spec, |p| f.dropout(p, self.dropout))?.0;
        f.dropout(out, self.dropout)
    }

    pub fn param_count(&self) -> usize {
        4 * self.q.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    fn vars<'t>(tape: &'t Tape, c: usize, seed: f64, zero_qk: bool) -> AttentionVars<'t> {
        let m = |k: f64, zero: bool| {
            tape.leaf(Tensor::from_fn([c, c], |i| if zero { 0.0 } else { ((i as f64 + 1.0) * (seed + k)).sin() * 0.5 }))
        };
        let v = |k: f64| tape.leaf(Tensor::from_fn([c], |i| ((i as f64 + 2.0) * (seed + k)).cos() * 0.1));
        AttentionVars {
            wq: m(0.1, zero_qk),
            bq: if zero_qk { tape.leaf(Tensor::zeros([c])) } else { v(0.2) },
            wk: m(0.3, zero_qk),
            bk: if zero_qk { tape.leaf(Tensor::zeros([c])) } else { v(0.4) },
            wv: m(0.5, false),
            bv: v(0.6),
            wo: m(0.7, false),
            bo: v(0.8),
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        assert!(AttentionSpec::new(10, 3).is_err());
        assert!(AttentionSpec::new(12, 3).is_ok());
    }

    #[test]
    fn single_token_is_value_projection() {
        let tape = Tape::new();
        let p = vars(&tape, 4, 1.3, false);
        let spec = AttentionSpec::new(4, 2).unwrap();
        let x = tape.constant(Tensor::from_fn([1, 1, 4], |i| i as f64 - 1.5));
        let (out, w) = multi_head_attention_weights(x, &p, &spec).unwrap();
        assert!(w.value().data().iter().all(|&v| v == 1.0));
        let want = linear(linear(x, p.wv, p.bv).unwrap(), p.wo, p.bo).unwrap().value();
        assert!(out.value().max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn zero_query_key_gives_uniform_weights() {
        let tape = Tape::new();
        let p = vars(&tape, 4, 0.7, true);
        let spec = AttentionSpec::new(4, 2).unwrap();
        let x = tape.constant(Tensor::from_fn([2, 3, 4], |i| (i as f64 * 0.37).sin()));
        let (out, w) = multi_head_attention_weights(x, &p, &spec).unwrap();
        assert!(w.value().data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let pooled = linear(x, p.wv, p.bv).unwrap().mean_axis(1, true).unwrap();
        let want = linear(pooled, p.wo, p.bo).unwrap().value();
        let got = out.value();
        for b in 0..2 {
            for n in 0..3 {
                for c in 0..4 {
                    assert!((got.get(&[b, n, c]) - want.get(&[b, 0, c])).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn weights_are_row_stochastic() {
        let tape = Tape::new();
        let p = vars(&tape, 8, 0.31, false);
        let spec = AttentionSpec::new(8, 2).unwrap();
        let x = tape.constant(Tensor::from_fn([2, 5, 8], |i| (i as f64 * 0.11).cos()));
        let (_, w) = multi_head_attention_weights(x, &p, &spec).unwrap();
        for row in w.value().data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
