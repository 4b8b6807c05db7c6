//! Named, ordered parameter storage with gradient buffers.

use indexmap::IndexMap;

use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Trainable tensors keyed by dotted names such as `blocks.0.mlp.fc1.weight`.
/// Registration order is the canonical order for checkpoints and optimizer
/// state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Per-parameter gradients detached from any tape, in store order.
pub type GradSet = Vec<Option<Vec<f64>>>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Invalid(format!("parameter {name} registered twice")));
        }
        self.tensors.insert(name, value);
        self.grads.push(None);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.tensors.get_index_of(name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.tensors.get_index(id.0).expect("param id").0
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn grad(&self, id: ParamId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Adds detached gradients into the store's buffers.
    pub fn accumulate(&mut self, grads: GradSet) {
        assert_eq!(grads.len(), self.grads.len(), "gradient set size");
        for (slot, g) in self.grads.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            match slot {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }
    }

    /// Euclidean norm of all accumulated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().flatten().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Records every parameter on `tape` as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bindings<'t> {
        Bindings { vars: self.tensors.values().map(|t| tape.leaf(t.clone())).collect() }
    }
}

/// Tape variables for every parameter of a [`ParamStore`].
pub struct Bindings<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bindings<'t> {
    /// Uses `vars` as the parameters, in store order.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Bindings { vars }
    }

    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Reads the leaf gradients out of the tape.
    pub fn grads(&self) -> GradSet {
        self.vars.iter().map(|v| v.grad().map(Tensor::into_data)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_and_accumulate() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::new([2], vec![1.0, 2.0]).unwrap()).unwrap();
        let unused = store.register("u", Tensor::ones([1])).unwrap();
        assert!(store.register("w", Tensor::ones([1])).is_err());
        for _ in 0..2 {
            let tape = Tape::new();
            let b = store.bind(&tape);
            let loss = b.get(w).mul(b.get(w)).unwrap().sum();
            tape.backward(loss).unwrap();
            store.accumulate(b.grads());
        }
        assert_eq!(store.grad(w).unwrap(), &[4.0, 8.0]);
        assert!(store.grad(unused).is_none());
        assert!((store.grad_norm() - 80f64.sqrt()).abs() < 1e-12);
        assert_eq!(store.name(w), "w");
        assert_eq!(store.id("u"), Some(unused));
    }
}
