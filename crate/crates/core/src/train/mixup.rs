use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::tensor::{Tensor, TensorError};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixupConfig {
    pub enabled: bool,
    /// Both shape parameters of the Beta distribution for the mixing weight.
    pub alpha: f64,
    /// Replaces the sampled weight when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_lambda: Option<f64>,
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig { enabled: true, alpha: 0.8, fixed_lambda: None }
    }
}

impl MixupConfig {
    pub fn disabled() -> Self {
        MixupConfig { enabled: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("mixup: alpha must be positive, got {}", self.alpha)));
        }
        if let Some(l) = self.fixed_lambda {
            check_lambda(l)?;
        }
        Ok(())
    }

    /// Mixing weight for one batch.
    pub fn sample_lambda(&self, rng: &mut impl Rng) -> Result<f64> {
        if let Some(l) = self.fixed_lambda {
            return Ok(l);
        }
        let beta = Beta::new(self.alpha, self.alpha).map_err(|e| Error::Config(format!("mixup: {e}")))?;
        Ok(beta.sample(rng))
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Invalid(format!("mixup weight {lambda} outside [0, 1]")));
    }
    Ok(())
}

/// `(lambda * x1 + (1 - lambda) * x2, lambda * y1 + (1 - lambda) * y2)`.
pub fn mixup_batch(x1: &Tensor, x2: &Tensor, y1: &Tensor, y2: &Tensor, lambda: f64) -> Result<(Tensor, Tensor)> {
    check_lambda(lambda)?;
    let mix = |a: &Tensor, b: &Tensor, op: &'static str| -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }.into());
        }
        let data = a.data().iter().zip(b.data()).map(|(p, q)| lambda * p + (1.0 - lambda) * q).collect();
        Ok(Tensor::new(a.shape(), data)?)
    };
    Ok((mix(x1, x2, "mixup images")?, mix(y1, y2, "mixup labels")?))
}

/// `[B, K]` one-hot rows.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    Tensor::from_fn([labels.len(), classes], |i| (labels[i / classes] == i % classes) as u8 as f64)
}
