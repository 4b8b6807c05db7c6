//! Convolutional stem: a large-kernel convolution followed by a pyramid of
//! parallel atrous convolutions whose outputs are concatenated on the
//! channel axis.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Activation, Conv2d, Conv2dSpec, Forward};
use crate::params::ParamStore;
use crate::tensor::{TensorError, Var};
use crate::{Context, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StemConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    /// Output channels of each atrous branch.
    pub branch_channels: usize,
    /// One branch per rate, concatenated in this order.
    pub rates: Vec<usize>,
    pub branch_kernel: (usize, usize),
    pub activation: Activation,
}

impl Default for StemConfig {
    fn default() -> Self {
        StemConfig {
            in_channels: 3,
            stem_channels: 64,
            stem_kernel: 7,
            stem_stride: 2,
            branch_channels: 48,
            rates: vec![1, 2, 3, 4],
            branch_kernel: (3, 3),
            activation: Activation::Relu,
        }
    }
}

/// Receptive field of one branch output pixel on the input image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BranchField {
    pub rate: usize,
    pub height: usize,
    pub width: usize,
}

impl StemConfig {
    pub fn out_channels(&self) -> usize {
        self.rates.len() * self.branch_channels
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("stem: {msg}")));
        if self.rates.is_empty() || self.rates.contains(&0) {
            return fail(format!("rates must be non-empty and positive, got {:?}", self.rates));
        }
        if self.stem_kernel.is_multiple_of(2)
            || self.branch_kernel.0.is_multiple_of(2)
            || self.branch_kernel.1.is_multiple_of(2)
        {
            return fail("kernels must have odd size so padding preserves the grid".into());
        }
        if [self.in_channels, self.stem_channels, self.stem_stride, self.branch_channels].contains(&0) {
            return fail("channel counts and stride must be positive".into());
        }
        Ok(())
    }

    pub fn stem_spec(&self) -> Conv2dSpec {
        Conv2dSpec::new(self.in_channels, self.stem_channels, self.stem_kernel)
            .stride(self.stem_stride)
            .padding(self.stem_kernel / 2)
    }

    /// Branch convolution at `rate`, padded by `rate * (k - 1) / 2` so the
    /// spatial grid is unchanged.
    pub fn branch_spec(&self, rate: usize) -> Conv2dSpec {
        let (kh, kw) = self.branch_kernel;
        Conv2dSpec {
            in_channels: self.stem_channels,
            out_channels: self.branch_channels,
            kernel: (kh, kw),
            stride: (1, 1),
            padding: (rate * (kh - 1) / 2, rate * (kw - 1) / 2),
            dilation: (rate, rate),
        }
    }

    /// Grid produced for an `h x w` image.
    pub fn output_grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if !h.is_multiple_of(self.stem_stride) || !w.is_multiple_of(self.stem_stride) {
            return Err(Error::Config(format!(
                "stem: input {h}x{w} not divisible by stem stride {}",
                self.stem_stride
            )));
        }
        Ok(self.stem_spec().output_size(h, w)?)
    }

    /// `rf = k_stem + rate * (k_branch - 1) * stem_stride` per axis.
    pub fn receptive_fields(&self) -> Vec<BranchField> {
        let (kh, kw) = self.branch_kernel;
        self.rates
            .iter()
            .map(|&rate| BranchField {
                rate,
                height: self.stem_kernel + rate * (kh - 1) * self.stem_stride,
                width: self.stem_kernel + rate * (kw - 1) * self.stem_stride,
            })
            .collect()
    }
}

/// Analytic receptive field of every branch.
pub fn stem_receptive_field(config: &StemConfig) -> Vec<BranchField> {
    config.receptive_fields()
}

#[derive(Debug, Clone)]
pub struct CnnStem {
    pub config: StemConfig,
    pub stem: Conv2d,
    pub branches: Vec<Conv2d>,
}

impl CnnStem {
    /// Registers `stem.conv.*` and `stem.branch{1..}.*`.
    pub fn new(store: &mut ParamStore, config: StemConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let stem = Conv2d::new(store, "stem.conv", config.stem_spec(), rng)?;
        let branches = config
            .rates
            .iter()
            .enumerate()
            .map(|(i, &r)| Conv2d::new(store, &format!("stem.branch{}", i + 1), config.branch_spec(r), rng))
            .collect::<Result<_>>()?;
        Ok(CnnStem { config, stem, branches })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(TensorError::ShapeMismatch {
                op: "stem",
                lhs: shape.to_vec(),
                rhs: vec![self.config.in_channels],
            }
            .into());
        }
        self.config.output_grid(shape[2], shape[3]).map(|_| ())
    }

    /// Activated output of every branch, in rate order.
    pub fn forward_branches<'t>(&self, f: &Forward<'_, 't>, x: Var<'t>) -> Result<Vec<Var<'t>>> {
        self.check_input(&x.shape())?;
        let act = self.config.activation;
        let base = act.apply(self.stem.forward(f, x).at(|| "stem.conv".into())?);
        let outs: Vec<Var<'t>> = self
            .branches
            .iter()
            .enumerate()
            .map(|(i, b)| Ok(act.apply(b.forward(f, base).at(|| format!("stem.branch{}", i + 1))?)))
            .collect::<Result<_>>()?;
        let first = outs[0].shape();
        assert!(outs.iter().all(|o| o.shape() == first), "branch outputs disagree in shape");
        Ok(outs)
    }

    /// `[B, 3, H, W]` to `[B, rates * branch_channels, H / s, W / s]`.
    pub fn forward<'t>(&self, f: &Forward<'_, 't>, x: Var<'t>) -> Result<Var<'t>> {
        let outs = self.forward_branches(f, x)?;
        Ok(f.tape.concat(&outs, 1)?)
    }

    pub fn param_count(&self) -> usize {
        self.stem.param_count() + self.branches.iter().map(Conv2d::param_count).sum::<usize>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> StemConfig {
        StemConfig { stem_channels: 4, branch_channels: 2, ..StemConfig::default() }
    }

    #[test]
    fn receptive_fields_follow_recurrence() {
        let unit = StemConfig { stem_stride: 1, ..small() };
        let rf: Vec<usize> = unit.receptive_fields().iter().map(|b| b.height).collect();
        assert_eq!(rf, vec![9, 11, 13, 15]);
        let strided = StemConfig { stem_stride: 2, ..small() };
        assert_eq!(strided.receptive_fields()[2].height, 19);
    }

    #[test]
    fn zero_input_and_bias_gives_zero_output() {
        let mut store = ParamStore::new();
        let stem = CnnStem::new(&mut store, small(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let tape = Tape::new();
        let b = store.bind(&tape);
        let f = Forward::eval(&tape, &b);
        let y = stem.forward(&f, tape.constant(Tensor::zeros([2, 3, 16, 16]))).unwrap().value();
        assert_eq!(y.shape(), &[2, 8, 8, 8]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_branches_repeat() {
        let cfg = StemConfig { rates: vec![1, 1, 1, 1], ..small() };
        let mut store = ParamStore::new();
        let stem = CnnStem::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let w1 = store.get(stem.branches[0].weight).clone();
        let b1 = Tensor::from_fn([2], |i| 0.1 * i as f64);
        for br in &stem.branches {
            *store.get_mut(br.weight) = w1.clone();
            *store.get_mut(br.bias) = b1.clone();
        }
        let tape = Tape::new();
        let b = store.bind(&tape);
        let f = Forward::eval(&tape, &b);
        let x = tape.constant(Tensor::from_fn([1, 3, 8, 8], |i| (i as f64 * 0.3).sin()));
        let y = stem.forward(&f, x).unwrap();
        let first = y.slice(1, 0, 2).unwrap().value();
        for k in 1..4 {
            assert_eq!(y.slice(1, 2 * k, 2 * k + 2).unwrap().value(), first);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let mut store = ParamStore::new();
        let stem = CnnStem::new(&mut store, small(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let tape = Tape::new();
        let b = store.bind(&tape);
        let f = Forward::eval(&tape, &b);
        assert!(stem.forward(&f, tape.constant(Tensor::zeros([1, 3, 15, 16]))).is_err());
        assert!(stem.forward(&f, tape.constant(Tensor::zeros([1, 1, 16, 16]))).is_err());
        assert!(StemConfig { rates: vec![], ..small() }.validate().is_err());
    }
}
