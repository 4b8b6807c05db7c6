use crate::tensor::Tensor;
use crate::tensor::{TensorError, Var};
use crate::{Error, Result};

/// Batch mean of `-sum_k y_k * log_softmax(logits)_k`.
pub fn cross_entropy_soft<'t>(logits: Var<'t>, soft_labels: &Tensor) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape.len() != 2 || soft_labels.shape() != shape.as_slice() {
        return Err(TensorError::ShapeMismatch {
            op: "cross_entropy_soft",
            lhs: shape,
            rhs: soft_labels.shape().to_vec(),
        }
        .into());
    }
    let (b, k) = (shape[0], shape[1]);
    for (row, y) in soft_labels.data().chunks(k).enumerate() {
        let total: f64 = y.iter().sum();
        if (total - 1.0).abs() > 1e-6 || y.iter().any(|&v| v < 0.0) {
            return Err(Error::Invalid(format!("soft label row {row} sums to {total} or has negative weight")));
        }
    }
    let y = logits.tape().constant(soft_labels.clone());
    Ok(logits.log_softmax(1)?.mul(y)?.sum().scale(-1.0 / b as f64))
}

/// Hard-label cross-entropy via index gather.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    Ok(logits.log_softmax(1)?.gather(labels)?.mean().scale(-1.0))
}
