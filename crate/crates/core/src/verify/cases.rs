//! Registry of gradient-check cases, one or more per differentiable op and
//! layer, each building a random instance from a seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_gradients_sampled, GradCheckReport, DEFAULT_STEP};
use crate::model::{Covt, ModelConfig};
use crate::nn::{conv2d, linear, multi_head_attention, Activation, AttentionSpec, AttentionVars, Conv2dSpec, Forward};
use crate::params::{Bindings, ParamStore};
use crate::stem::{CnnStem, StemConfig};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::cross_entropy_soft;
use crate::transformer::{
    improved_mlp, improved_mlp_with, original_mlp, tokenize, EncoderBlock, EncoderConfig, MlpMode,
};
use crate::Result;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

pub type CaseFn = fn(u64) -> Result<GradCheckReport>;

pub struct GradCase {
    pub name: &'static str,
    /// Op kinds (as reported by the tape) this case exercises directly.
    pub covers: &'static [&'static str],
    /// Seeds run by the default suite.
    pub instances: u64,
    pub run: CaseFn,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(17))
}

fn uniform(shape: &[usize], r: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
}

/// Values in `[0.2, 1]` in magnitude with random sign, clear of kinks at 0.
fn off_zero(shape: &[usize], r: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = r.random_range(0.2..1.0);
        if r.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn binary(op: &'static str, seed: u64, f: for<'t> fn(Var<'t>, Var<'t>) -> Result<Var<'t>>) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let rhs_shapes: [&[usize]; 5] = [&[2, 3, 4], &[4], &[3, 1], &[1, 3, 1], &[2, 1, 4]];
    let rhs = rhs_shapes[(seed % 5) as usize];
    let (a, b) = (uniform(&[2, 3, 4], &mut r), uniform(rhs, &mut r));
    let inputs = if seed.is_multiple_of(2) { [("a", a), ("b", b)] } else { [("a", b), ("b", a)] };
    super::check_gradients(op, seed, OP_TOLERANCE, DEFAULT_STEP, &inputs, |_, v| f(v[0], v[1]))
}

fn unary(
    op: &'static str,
    seed: u64,
    x: Tensor,
    f: for<'t> fn(Var<'t>, u64) -> Result<Var<'t>>,
) -> Result<GradCheckReport> {
    super::check_gradients(op, seed, OP_TOLERANCE, DEFAULT_STEP, &[("x", x)], |_, v| f(v[0], seed))
}

fn case_add(seed: u64) -> Result<GradCheckReport> {
    binary("add", seed, |a, b| Ok(a.add(b)?))
}

fn case_sub(seed: u64) -> Result<GradCheckReport> {
    binary("sub", seed, |a, b| Ok(a.sub(b)?))
}

fn case_mul(seed: u64) -> Result<GradCheckReport> {
    binary("mul", seed, |a, b| Ok(a.mul(b)?))
}

fn case_scale(seed: u64) -> Result<GradCheckReport> {
    unary("scale", seed, uniform(&[3, 4], &mut rng(seed)), |x, s| Ok(x.scale(0.5 + s as f64 * 0.37)))
}

fn case_add_scalar(seed: u64) -> Result<GradCheckReport> {
    unary("add_scalar", seed, uniform(&[3, 4], &mut rng(seed)), |x, s| Ok(x.add_scalar(s as f64 - 2.5).mul(x)?))
}

fn case_matmul(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let shapes: [(&[usize], &[usize]); 4] =
        [(&[2, 3], &[3, 4]), (&[2, 3, 4], &[4, 5]), (&[2, 1, 3, 4], &[3, 4, 2]), (&[2, 3, 4], &[2, 4, 3])];
    let (sa, sb) = shapes[(seed % 4) as usize];
    let inputs = [("a", uniform(sa, &mut r)), ("b", uniform(sb, &mut r))];
    super::check_gradients("matmul", seed, OP_TOLERANCE, DEFAULT_STEP, &inputs, |_, v| Ok(v[0].matmul(v[1])?))
}

fn case_reshape(seed: u64) -> Result<GradCheckReport> {
    unary("reshape", seed, uniform(&[2, 3, 4], &mut rng(seed)), |x, _| {
        Ok(x.reshape([4, 6])?.mul(x.reshape([4, 6])?)?)
    })
}

fn case_permute(seed: u64) -> Result<GradCheckReport> {
    unary("permute", seed, uniform(&[2, 3, 4], &mut rng(seed)), |x, s| {
        let mut perm = vec![0, 1, 2];
        perm.shuffle(&mut rng(s));
        Ok(x.permute(&perm)?.transpose(0, 2)?)
    })
}

fn case_concat(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let axis = (seed % 3) as usize;
    let part = |n: usize, r: &mut ChaCha8Rng| {
        let mut shape = vec![2, 3, 2];
        shape[axis] = n;
        uniform(&shape, r)
    };
    let inputs = [("a", part(1, &mut r)), ("b", part(2, &mut r)), ("c", part(3, &mut r))];
    super::check_gradients("concat", seed, OP_TOLERANCE, DEFAULT_STEP, &inputs, move |t, v| Ok(t.concat(v, axis)?))
}

fn case_slice(seed: u64) -> Result<GradCheckReport> {
    unary("slice", seed, uniform(&[3, 4, 5], &mut rng(seed)), |x, s| {
        let mut r = rng(s + 1000);
        let axis = r.random_range(0..3);
        let len = x.shape()[axis];
        let start = r.random_range(0..len);
        let end = r.random_range(start + 1..=len);
        Ok(x.slice(axis, start, end)?)
    })
}

fn case_relu(seed: u64) -> Result<GradCheckReport> {
    unary("relu", seed, off_zero(&[3, 5], &mut rng(seed)), |x, _| Ok(x.relu()))
}

fn case_gelu(seed: u64) -> Result<GradCheckReport> {
    let x = uniform(&[3, 5], &mut rng(seed)).map(|v| 3.0 * v);
    unary("gelu", seed, x, |x, _| Ok(x.gelu()))
}

fn case_softmax(seed: u64) -> Result<GradCheckReport> {
    let x = uniform(&[2, 3, 4], &mut rng(seed)).map(|v| 2.0 * v);
    unary("softmax", seed, x, |x, s| Ok(x.softmax((s % 3) as usize)?))
}

fn case_log_softmax(seed: u64) -> Result<GradCheckReport> {
    let x = uniform(&[2, 3, 4], &mut rng(seed)).map(|v| 2.0 * v);
    unary("log_softmax", seed, x, |x, s| Ok(x.log_softmax((s % 3) as usize)?))
}

fn case_layer_norm(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let inputs = [
        ("x", uniform(&[2, 3, 5], &mut r)),
        ("gamma", uniform(&[5], &mut r).map(|v| 1.0 + 0.5 * v)),
        ("beta", uniform(&[5], &mut r)),
    ];
    super::check_gradients("layer_norm", seed, OP_TOLERANCE, DEFAULT_STEP, &inputs, |_, v| {
        Ok(v[0].layer_norm(v[1], v[2], 1e-6)?)
    })
}

fn case_sum_axis(seed: u64) -> Result<GradCheckReport> {
    unary("sum_axis", seed, uniform(&[2, 3, 4], &mut rng(seed)), |x, s| Ok(x.sum_axis((s % 3) as usize, s % 2 == 0)?))
}

fn case_mean_axis(seed: u64) -> Result<GradCheckReport> {
    unary("mean_axis", seed, uniform(&[2, 3, 4], &mut rng(seed)), |x, s| Ok(x.mean_axis((s % 3) as usize, s % 2 == 1)?))
}

fn case_sum(seed: u64) -> Result<GradCheckReport> {
    unary("sum", seed, uniform(&[2, 3], &mut rng(seed)), |x, _| Ok(x.mul(x)?.sum().add(x.mean())?))
}

fn case_gather(seed: u64) -> Result<GradCheckReport> {
    unary("gather", seed, uniform(&[4, 3], &mut rng(seed)), |x, s| {
        let mut r = rng(s + 7);
        let idx: Vec<usize> = (0..4).map(|_| r.random_range(0..3)).collect();
        Ok(x.gather(&idx)?)
    })
}

/// Random convolution instance: kernel 1, 3 or 7, stride 1-2, dilation
/// 1-4, padding up to half the dilated span plus one.
pub fn random_conv_instance(r: &mut impl Rng) -> (Conv2dSpec, [usize; 4]) {
    let k = [1, 3, 7][r.random_range(0..3)];
    let d = r.random_range(1..=4);
    let s = r.random_range(1..=2);
    let span = d * (k - 1) + 1;
    let p = r.random_range(0..=span / 2 + 1);
    let spec = Conv2dSpec::new(r.random_range(1..=3), r.random_range(1..=3), k).stride(s).dilation(d).padding(p);
    let min = span.saturating_sub(2 * p).max(1);
    let h = min + r.random_range(0..4);
    let w = min + r.random_range(0..4);
    (spec, [r.random_range(1..=2), spec.in_channels, h, w])
}

fn case_conv2d(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let (spec, xs) = random_conv_instance(&mut r);
    let inputs = [
        ("x", uniform(&xs, &mut r)),
        ("weight", uniform(&spec.weight_shape(), &mut r)),
        ("bias", uniform(&[spec.out_channels], &mut r)),
    ];
    super::check_gradients("conv2d", seed, OP_TOLERANCE, DEFAULT_STEP, &inputs, move |_, v| {
        Ok(conv2d(v[0], v[1], v[2], &spec)?)
    })
}

fn case_linear(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let inputs = [("x", uniform(&[2, 3, 4], &mut r)), ("w", uniform(&[4, 5], &mut r)), ("b", uniform(&[5], &mut r))];
    super::check_gradients("linear", seed, OP_TOLERANCE, DEFAULT_STEP, &inputs, |_, v| Ok(linear(v[0], v[1], v[2])?))
}

fn case_attention(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let (c, heads) = if seed.is_multiple_of(2) { (8, 2) } else { (6, 3) };
    let mut inputs = vec![("x", uniform(&[2, 4, c], &mut r))];
    for name in ["wq", "bq", "wk", "wv", "bv", "wo", "bo"] {
        let shape: &[usize] = if name.starts_with('w') { &[c, c] } else { &[c] };
        inputs.push((name, uniform(shape, &mut r)));
    }
    let bk = uniform(&[c], &mut r);
    let spec = AttentionSpec { embed_dim: c, num_heads: heads };
    super::check_gradients("attention", seed, OP_TOLERANCE, DEFAULT_STEP, &inputs, move |t, v| {
        let bk = t.constant(bk.clone());
        let p = AttentionVars { wq: v[1], bq: v[2], wk: v[3], bk, wv: v[4], bv: v[5], wo: v[6], bo: v[7] };
        Ok(multi_head_attention(v[0], &p, &spec)?)
    })
}

fn mlp_inputs(seed: u64, branches: usize) -> Vec<(&'static str, Tensor)> {
    let mut r = rng(seed);
    let (c, h) = (6, 8);
    let mut inputs = vec![("x", uniform(&[2, 5, c], &mut r))];
    let names = [["fc1.w", "fc1.b", "fc2.w", "fc2.b"], ["gfc1.w", "gfc1.b", "gfc2.w", "gfc2.b"]];
    for names in names.iter().take(branches) {
        for (name, shape) in names.iter().zip([vec![c, h], vec![h], vec![h, c], vec![c]]) {
            inputs.push((name, uniform(&shape, &mut r)));
        }
    }
    inputs
}

fn case_original_mlp(seed: u64) -> Result<GradCheckReport> {
    super::check_gradients("original_mlp", seed, OP_TOLERANCE, DEFAULT_STEP, &mlp_inputs(seed, 1), |_, v| {
        Ok(original_mlp(v[0], (v[1], v[2]), (v[3], v[4]), Activation::Gelu)?)
    })
}

fn case_improved_mlp(seed: u64) -> Result<GradCheckReport> {
    super::check_gradients("improved_mlp", seed, OP_TOLERANCE, DEFAULT_STEP, &mlp_inputs(seed, 1), |_, v| {
        Ok(improved_mlp(v[0], (v[1], v[2]), (v[3], v[4]), Activation::Gelu)?)
    })
}

fn case_improved_mlp_unshared(seed: u64) -> Result<GradCheckReport> {
    super::check_gradients("improved_mlp_unshared", seed, OP_TOLERANCE, DEFAULT_STEP, &mlp_inputs(seed, 2), |_, v| {
        Ok(improved_mlp_with(v[0], (v[1], v[2]), (v[3], v[4]), (v[5], v[6]), (v[7], v[8]), Activation::Gelu)?)
    })
}

fn case_tokenize(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let (cf, c, p) = (3, 5, 2);
    let spec = Conv2dSpec::new(cf, c, p).stride(p);
    let inputs = [
        ("fmap", uniform(&[2, cf, 4, 4], &mut r)),
        ("proj.w", uniform(&spec.weight_shape(), &mut r)),
        ("proj.b", uniform(&[c], &mut r)),
        ("cls", uniform(&[1, 1, c], &mut r)),
        ("pos", uniform(&[1, 5, c], &mut r)),
    ];
    super::check_gradients("tokenize", seed, OP_TOLERANCE, DEFAULT_STEP, &inputs, move |_, v| {
        Ok(tokenize(v[0], (v[1], v[2]), &spec, v[3], v[4])?)
    })
}

fn case_cross_entropy(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let raw = Tensor::from_fn([3, 4], |_| r.random_range(0.05..1.0));
    let labels = Tensor::from_fn([3, 4], |i| raw.data()[i] / raw.data()[i / 4 * 4..i / 4 * 4 + 4].iter().sum::<f64>());
    let inputs = [("logits", uniform(&[3, 4], &mut r).map(|v| 3.0 * v))];
    super::check_gradients("cross_entropy_soft", seed, OP_TOLERANCE, DEFAULT_STEP, &inputs, move |_, v| {
        cross_entropy_soft(v[0], &labels)
    })
}

fn case_dropout(seed: u64) -> Result<GradCheckReport> {
    unary("dropout", seed, uniform(&[4, 6], &mut rng(seed)), |x, s| {
        let none = Bindings::from_vars(Vec::new());
        let f = Forward::train(x.tape(), &none, rng(s + 99));
        Ok(f.dropout(x, 0.3)?.mul(x)?)
    })
}

/// Key-projection biases shift every attention logit in a row by the same
/// amount, so their exact gradient is zero and a relative comparison only
/// measures finite-difference noise. They are held constant here and
/// checked for a vanishing gradient by the test suite instead.
pub fn has_null_gradient(name: &str) -> bool {
    name.ends_with(".k.bias")
}

/// Checks a store-backed layer with respect to its input and every
/// parameter with a non-null gradient.
fn store_case(
    op: &'static str,
    seed: u64,
    tolerance: f64,
    store: &ParamStore,
    x: Option<Tensor>,
    forward: impl for<'t> Fn(&Forward<'_, 't>, Var<'t>) -> Result<Var<'t>>,
    input: Tensor,
) -> Result<GradCheckReport> {
    sampled_store_case(op, seed, tolerance, store, x, forward, input, usize::MAX)
}

#[allow(clippy::too_many_arguments)]
fn sampled_store_case(
    op: &'static str,
    seed: u64,
    tolerance: f64,
    store: &ParamStore,
    x: Option<Tensor>,
    forward: impl for<'t> Fn(&Forward<'_, 't>, Var<'t>) -> Result<Var<'t>>,
    input: Tensor,
    per_input: usize,
) -> Result<GradCheckReport> {
    let mut inputs: Vec<(&str, Tensor)> = x.iter().map(|t| ("x", t.clone())).collect();
    inputs.extend(store.iter().filter(|(n, _)| !has_null_gradient(n)).map(|(n, t)| (n, t.clone())));
    let with_x = usize::from(x.is_some());
    check_gradients_sampled(op, seed, tolerance, DEFAULT_STEP, &inputs, per_input, |tape: &Tape, v| {
        let mut checked = v[with_x..].iter();
        let vars =
            store
                .iter()
                .map(|(n, t)| {
                    if has_null_gradient(n) {
                        tape.constant(t.clone())
                    } else {
                        *checked.next().expect("checked param")
                    }
                })
                .collect();
        let bound = Bindings::from_vars(vars);
        let f = Forward::eval(tape, &bound);
        let arg = if with_x == 1 { v[0] } else { tape.constant(input.clone()) };
        forward(&f, arg)
    })
}

fn case_encoder_block(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let modes = [MlpMode::Improved, MlpMode::ImprovedUnshared, MlpMode::Original];
    let cfg = EncoderConfig {
        depth: 1,
        embed_dim: 8,
        num_heads: 2,
        mlp_ratio: 2.0,
        mlp_mode: modes[(seed % 3) as usize],
        ..EncoderConfig::default()
    };
    let mut store = ParamStore::new();
    let block = EncoderBlock::new(&mut store, "block", &cfg, &mut r)?;
    for (_, t) in store.iter_mut() {
        *t = t.map(|v| v * 10.0 + 0.05);
    }
    let x = uniform(&[1, 5, 8], &mut r);
    store_case("encoder_block", seed, OP_TOLERANCE, &store, Some(x.clone()), |f, x| Ok(block.forward(f, x)?), x)
}

fn case_cnn_stem(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let cfg = StemConfig {
        stem_channels: 3,
        branch_channels: 2,
        rates: vec![1, 2],
        stem_stride: 1 + (seed % 2) as usize,
        ..StemConfig::default()
    };
    let mut store = ParamStore::new();
    let stem = CnnStem::new(&mut store, cfg, &mut r)?;
    let x = uniform(&[1, 3, 8, 8], &mut r);
    store_case("cnn_stem", seed, OP_TOLERANCE, &store, Some(x.clone()), |f, x| stem.forward(f, x), x)
}

fn case_model(seed: u64) -> Result<GradCheckReport> {
    let model = Covt::new(ModelConfig::tiny(), seed)?;
    let (h, w) = model.config.image_size;
    let x = uniform(&[1, 3, h, w], &mut rng(seed));
    store_case("model", seed, END_TO_END_TOLERANCE, &model.params, None, |f, x| Ok(model.forward(f, x)?.sum()), x)
}

/// The micro configuration end to end, differenced on a seeded sample of
/// coordinates per parameter tensor (every coordinate of small tensors).
pub fn micro_model_case(seed: u64, per_tensor: usize) -> Result<GradCheckReport> {
    let model = Covt::new(ModelConfig::micro(), seed)?;
    let (h, w) = model.config.image_size;
    let x = uniform(&[1, 3, h, w], &mut rng(seed));
    sampled_store_case(
        "model_micro",
        seed,
        END_TO_END_TOLERANCE,
        &model.params,
        None,
        |f, x| Ok(model.forward(f, x)?.sum()),
        x,
        per_tensor,
    )
}

fn case_model_micro(seed: u64) -> Result<GradCheckReport> {
    micro_model_case(seed, 12)
}

/// Every registered case. The coverage guard in the test suite requires
/// each built-in op kind and custom op to appear in some `covers` list.
pub fn grad_cases() -> Vec<GradCase> {
    macro_rules! case {
        ($name:literal, $covers:expr, $n:expr, $f:ident) => {
            GradCase { name: $name, covers: $covers, instances: $n, run: $f }
        };
    }
    vec![
        case!("add", &["add"], 5, case_add),
        case!("sub", &["sub"], 5, case_sub),
        case!("mul", &["mul"], 5, case_mul),
        case!("scale", &["scale"], 3, case_scale),
        case!("add_scalar", &["add_scalar", "mul"], 3, case_add_scalar),
        case!("matmul", &["matmul"], 8, case_matmul),
        case!("reshape", &["reshape", "mul"], 3, case_reshape),
        case!("permute", &["permute"], 6, case_permute),
        case!("concat", &["concat"], 6, case_concat),
        case!("slice", &["slice"], 6, case_slice),
        case!("relu", &["relu"], 5, case_relu),
        case!("gelu", &["gelu"], 5, case_gelu),
        case!("softmax", &["softmax"], 6, case_softmax),
        case!("log_softmax", &["log_softmax"], 6, case_log_softmax),
        case!("layer_norm", &["layer_norm"], 5, case_layer_norm),
        case!("sum_axis", &["sum_axis"], 6, case_sum_axis),
        case!("mean_axis", &["mean_axis"], 6, case_mean_axis),
        case!("sum", &["sum", "scale"], 3, case_sum),
        case!("gather", &["gather"], 5, case_gather),
        case!("conv2d", &["conv2d"], 20, case_conv2d),
        case!("linear", &["matmul", "add"], 3, case_linear),
        case!("attention", &["matmul", "softmax", "permute", "reshape"], 4, case_attention),
        case!("original_mlp", &["matmul", "gelu"], 3, case_original_mlp),
        case!("improved_mlp", &["mean_axis", "add"], 5, case_improved_mlp),
        case!("improved_mlp_unshared", &["mean_axis", "add"], 3, case_improved_mlp_unshared),
        case!("tokenize", &["conv2d", "concat", "permute"], 3, case_tokenize),
        case!("cross_entropy_soft", &["log_softmax", "mul", "sum"], 5, case_cross_entropy),
        case!("dropout", &["mul"], 3, case_dropout),
        case!("encoder_block", &["layer_norm", "softmax", "gelu"], 3, case_encoder_block),
        case!("cnn_stem", &["conv2d", "relu", "concat"], 4, case_cnn_stem),
        case!("model", &["slice"], 2, case_model),
        case!("model_micro", &["slice"], 2, case_model_micro),
    ]
}

/// Runs every case whose name contains `filter` (all when `None`) over its
/// default instance count. Reports are ordered by case name, then seed.
pub fn run_suite(filter: Option<&str>) -> Result<Vec<GradCheckReport>> {
    let jobs: Vec<(CaseFn, u64)> = grad_cases()
        .into_iter()
        .filter(|c| filter.is_none_or(|f| c.name.contains(f)))
        .flat_map(|c| (0..c.instances).map(move |s| (c.run, s)))
        .collect();
    #[cfg(feature = "parallel")]
    let mut reports: Vec<GradCheckReport> = {
        use rayon::prelude::*;
        jobs.par_iter().map(|(f, s)| f(*s)).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let mut reports: Vec<GradCheckReport> = jobs.iter().map(|(f, s)| f(*s)).collect::<Result<_>>()?;
    reports.sort_by(|a, b| a.op.cmp(&b.op).then(a.seed.cmp(&b.seed)));
    Ok(reports)
}
