use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { momentum: 0.9, weight_decay: 0.0 }
    }
}

/// Momentum buffers, one per parameter in store order, zero until the
/// first step.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: SgdConfig,
    pub velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: SgdConfig, params: &ParamStore) -> Self {
        OptimizerState { config, velocity: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect() }
    }

    pub fn named_velocity(&self, params: &ParamStore) -> Vec<(String, Tensor)> {
        params.iter().map(|(n, _)| n.to_string()).zip(self.velocity.iter().cloned()).collect()
    }

    /// Restores buffers saved by [`named_velocity`](Self::named_velocity);
    /// an empty list leaves them at zero.
    pub fn load_velocity(&mut self, params: &ParamStore, saved: &[(String, Tensor)]) -> Result<()> {
        if saved.is_empty() {
            return Ok(());
        }
        if saved.len() != params.len() {
            return Err(Error::Checkpoint(format!("{} velocity buffers for {} parameters", saved.len(), params.len())));
        }
        for ((name, t), (sname, v)) in params.iter().zip(saved) {
            if name != sname || t.shape() != v.shape() {
                return Err(Error::Checkpoint(format!(
                    "velocity {sname} {:?} does not match parameter {name} {:?}",
                    v.shape(),
                    t.shape()
                )));
            }
        }
        self.velocity = saved.iter().map(|(_, v)| v.clone()).collect();
        Ok(())
    }
}

/// `v <- mu * v + g + wd * p`, then `p <- p - lr * v`, using the gradients
/// accumulated in `params`.
pub fn sgd_step(params: &mut ParamStore, state: &mut OptimizerState, lr: f64) -> Result<()> {
    let ids: Vec<_> = params.ids().collect();
    if let Some(&id) = ids.iter().find(|&&id| params.grad(id).is_none()) {
        return Err(Error::Invalid(format!("missing gradient for parameter {}", params.name(id))));
    }
    let SgdConfig { momentum, weight_decay } = state.config;
    for id in ids {
        let grad = params.grad(id).expect("checked above").to_vec();
        let v = state.velocity[id.index()].data_mut();
        let p = params.get_mut(id).data_mut();
        for ((v, p), g) in v.iter_mut().zip(p.iter_mut()).zip(grad) {
            *v = momentum * *v + g + weight_decay * *p;
            *p -= lr * *v;
        }
    }
    Ok(())
}
