//! Weight initializers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

/// Normal(0, std) redrawn until it falls within two standard deviations.
pub fn trunc_normal(shape: impl Into<Vec<usize>>, std: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break z * std;
        }
    })
}

/// Uniform(-b, b) with `b = sqrt(6 / fan_in)`, the ReLU-gain He bound.
pub fn kaiming_uniform(shape: impl Into<Vec<usize>>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bounds_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = trunc_normal([1000], 0.02, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let k = kaiming_uniform([1000], 24, &mut rng);
        assert!(k.data().iter().all(|v| v.abs() < 0.5));
    }
}
