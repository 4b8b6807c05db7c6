//! Independent checks: central finite differences, direct-summation
//! convolution, a loop-level two-branch MLP, a receptive-field probe and a
//! determinism harness.

mod cases;
mod oracles;

pub use cases::{
    grad_cases, has_null_gradient, micro_model_case, random_conv_instance, run_suite, GradCase, END_TO_END_TOLERANCE,
    OP_TOLERANCE,
};
pub use oracles::{naive_conv2d, naive_token_mlp, naive_two_branch_mlp, Dense};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::nn::Forward;
use crate::params::ParamStore;
use crate::stem::{BranchField, CnnStem, StemConfig};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` per element.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> Result<f64>, x: &Tensor, h: f64) -> Result<Tensor> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Invalid(format!("finite difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Invalid(format!("non-finite function value at element {i}")));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(Tensor::new(x.shape(), grad)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArgError {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub seed: u64,
    pub tolerance: f64,
    pub step: f64,
    pub shapes: Vec<Vec<usize>>,
    pub args: Vec<ArgError>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.args.iter().map(|a| a.max_rel_err).fold(0.0, f64::max)
    }
}

/// Compares tape gradients of `build` against finite differences.
///
/// Non-scalar outputs are reduced with fixed random weights drawn from
/// `seed`, so every output element contributes a distinct amount.
pub fn check_gradients<F>(
    op: &str,
    seed: u64,
    tolerance: f64,
    h: f64,
    inputs: &[(&str, Tensor)],
    build: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    check_gradients_sampled(op, seed, tolerance, h, inputs, usize::MAX, build)
}

/// [`check_gradients`] restricted to at most `per_input` seeded coordinates
/// of each input, for models too large to difference exhaustively.
pub fn check_gradients_sampled<F>(
    op: &str,
    seed: u64,
    tolerance: f64,
    h: f64,
    inputs: &[(&str, Tensor)],
    per_input: usize,
    build: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Invalid(format!("finite difference step must be positive, got {h}")));
    }
    let weights = |shape: &[usize]| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    };
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let out = build(&tape, &vars)?;
    let r = weights(&out.shape());
    let loss = out.mul(tape.constant(r.clone()))?.sum();
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape()))).collect();

    let mut args = Vec::with_capacity(inputs.len());
    for (i, (name, x)) in inputs.iter().enumerate() {
        let f = |xi: &Tensor| -> Result<f64> {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = inputs
                .iter()
                .enumerate()
                .map(|(j, (_, t))| tape.constant(if j == i { xi.clone() } else { t.clone() }))
                .collect();
            let y = build(&tape, &vars)?.value();
            Ok(y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
        };
        let max_rel_err = if per_input >= x.numel() {
            let numeric = finite_diff_grad(f, x, h)?;
            analytic[i].data().iter().zip(numeric.data()).map(|(&a, &b)| rel_error(a, b)).fold(0.0, f64::max)
        } else {
            let mut pick = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let coords = rand::seq::index::sample(&mut pick, x.numel(), per_input);
            let mut probe = x.clone();
            let mut worst: f64 = 0.0;
            for j in coords {
                let orig = probe.data()[j];
                probe.data_mut()[j] = orig + h;
                let up = f(&probe)?;
                probe.data_mut()[j] = orig - h;
                let down = f(&probe)?;
                probe.data_mut()[j] = orig;
                if !up.is_finite() || !down.is_finite() {
                    return Err(Error::Invalid(format!("non-finite function value at element {j}")));
                }
                worst = worst.max(rel_error(analytic[i].data()[j], (up - down) / (2.0 * h)));
            }
            worst
        };
        args.push(ArgError { name: name.to_string(), max_rel_err });
    }
    Ok(GradCheckReport {
        op: op.to_string(),
        seed,
        tolerance,
        step: h,
        shapes: inputs.iter().map(|(_, t)| t.shape().to_vec()).collect(),
        passed: args.iter().all(|a| a.max_rel_err < tolerance),
        args,
    })
}

/// Measures each branch's receptive field by back-propagating from one
/// interior output pixel and taking the bounding box of the nonzero input
/// gradient. Weights and biases are made positive and the input is all
/// ones so no activation is clipped.
pub fn receptive_field_probe(config: &StemConfig, image: usize, seed: u64) -> Result<Vec<BranchField>> {
    let mut store = ParamStore::new();
    let stem = CnnStem::new(&mut store, config.clone(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    for (_, t) in store.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = v.abs() + 1e-3);
    }
    let (oh, ow) = config.output_grid(image, image)?;
    let mut fields = Vec::with_capacity(config.rates.len());
    for (b, &rate) in config.rates.iter().enumerate() {
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let f = Forward::eval(&tape, &bound);
        let x = tape.leaf(Tensor::ones([1, config.in_channels, image, image]));
        let out = stem.forward_branches(&f, x)?[b];
        let picked = out.slice(1, 0, 1)?.slice(2, oh / 2, oh / 2 + 1)?.slice(3, ow / 2, ow / 2 + 1)?;
        tape.backward(picked.sum())?;
        let grad = x.grad().expect("input requires grad");
        let (mut rows, mut cols) = ((usize::MAX, 0), (usize::MAX, 0));
        for (i, &g) in grad.data().iter().enumerate() {
            if g != 0.0 {
                let (r, c) = ((i / image) % image, i % image);
                rows = (rows.0.min(r), rows.1.max(r));
                cols = (cols.0.min(c), cols.1.max(c));
            }
        }
        if rows.0 == usize::MAX {
            return Err(Error::Invalid(format!("branch {rate}: input gradient is identically zero")));
        }
        if rows.0 == 0 || cols.0 == 0 || rows.1 == image - 1 || cols.1 == image - 1 {
            return Err(Error::Invalid(format!(
                "probe image {image} too small: branch {rate} field touches the border"
            )));
        }
        fields.push(BranchField { rate, height: rows.1 - rows.0 + 1, width: cols.1 - cols.0 + 1 });
    }
    Ok(fields)
}

/// True iff every run yields byte-identical artifacts. `run(i)` performs
/// the `i`-th run and returns its artifacts in a fixed order.
pub fn determinism_check(runs: usize, mut run: impl FnMut(usize) -> Result<Vec<Vec<u8>>>) -> Result<bool> {
    if runs < 2 {
        return Err(Error::Invalid(format!("determinism check needs at least 2 runs, got {runs}")));
    }
    let first = run(0)?;
    for i in 1..runs {
        if run(i)? != first {
            return Ok(false);
        }
    }
    Ok(true)
}
