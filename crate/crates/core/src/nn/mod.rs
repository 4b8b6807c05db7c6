//! Parameterized layers on top of the tape: convolution, linear, layer
//! norm, multi-head self-attention and dropout.

mod attention;
mod conv;
pub mod init;
mod linear;

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use attention::{
    multi_head_attention, multi_head_attention_weights, AttentionSpec, AttentionVars, MultiHeadAttention,
};
pub use conv::{conv2d, Conv2d, Conv2dSpec};
pub use linear::{linear, LayerNorm, Linear};

use crate::params::{Bindings, ParamId};
use crate::tensor::{Tape, Tensor, TensorResult, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Gelu => x.gelu(),
            Activation::Relu => x.relu(),
        }
    }
}

/// State shared by every layer during one forward pass: the tape, the
/// bound parameters and, in training mode, the dropout stream.
pub struct Forward<'a, 't> {
    pub tape: &'t Tape,
    params: &'a Bindings<'t>,
    dropout_rng: Option<RefCell<ChaCha8Rng>>,
}

impl<'a, 't> Forward<'a, 't> {
    pub fn eval(tape: &'t Tape, params: &'a Bindings<'t>) -> Self {
        Forward { tape, params, dropout_rng: None }
    }

    pub fn train(tape: &'t Tape, params: &'a Bindings<'t>, rng: ChaCha8Rng) -> Self {
        Forward { tape, params, dropout_rng: Some(RefCell::new(rng)) }
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        self.params.get(id)
    }

    /// Inverted dropout. Inert at rate 0 and in eval mode.
    pub fn dropout(&self, x: Var<'t>, rate: f64) -> TensorResult<Var<'t>> {
        let Some(rng) = self.dropout_rng.as_ref().filter(|_| rate > 0.0) else {
            return Ok(x);
        };
        let keep = 1.0 - rate;
        let mut rng = rng.borrow_mut();
        let mask = Tensor::from_fn(x.shape(), |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
        x.mul(self.tape.constant(mask))
    }
}
