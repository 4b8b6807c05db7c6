//! Differentiable operations. Each op computes its forward value eagerly,
//! records a node on the tape, and owns the matching rule in [`backward`].

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::tape::{Node, Tape, Var};
use super::{
    axis_split, broadcast_shapes, broadcast_strides, for_each_offset, numel, strides, Tensor, TensorError, TensorResult,
};

/// Backward rule for an op defined outside this module (convolution lives
/// with the layers). `needs[i]` says whether input `i` wants a gradient.
pub trait CustomBackward {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>>;
}

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Slice { input: usize, axis: usize, start: usize },
    Relu(usize),
    Gelu(usize),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    SumAll(usize),
    Gather(usize, Vec<usize>),
    Custom(Vec<usize>, Box<dyn CustomBackward>),
}

/// Kinds of built-in differentiable ops, as reported by [`Tape::op_kinds`].
pub const OP_KINDS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "matmul",
    "reshape",
    "permute",
    "concat",
    "slice",
    "relu",
    "gelu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "sum_axis",
    "mean_axis",
    "sum",
    "gather",
];

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::SumAll(..) => "sum",
            Op::Gather(..) => "gather",
            Op::Custom(_, rule) => rule.name(),
        }
    }
}

impl Tape {
    /// Distinct op kinds recorded so far, leaves excluded, sorted.
    pub fn op_kinds(&self) -> Vec<&'static str> {
        let mut kinds: Vec<_> = self.nodes().iter().map(|n| n.op.kind()).filter(|&k| k != "leaf").collect();
        kinds.sort_unstable();
        kinds.dedup();
        kinds
    }
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> TensorResult<()> {
    if axis >= rank {
        Err(TensorError::Axis { op, axis, rank })
    } else {
        Ok(())
    }
}

impl Tape {
    fn record(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        self.push(value, op, requires_grad)
    }

    fn same_tape(&self, vars: &[Var<'_>]) {
        assert!(vars.iter().all(|v| self.owns(*v)), "operands recorded on different tapes");
    }

    /// Records an op whose backward rule is supplied by the caller.
    pub fn custom<'t>(&'t self, inputs: &[Var<'t>], output: Tensor, rule: Box<dyn CustomBackward>) -> Var<'t> {
        self.same_tape(inputs);
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        self.record(output, Op::Custom(ids.clone(), rule), &ids)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> TensorResult<Var<'t>> {
        self.same_tape(parts);
        let first = parts.first().ok_or_else(|| TensorError::invalid("concat", "no inputs"))?.shape();
        check_axis("concat", axis, first.len())?;
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for p in parts {
            let s = p.shape();
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch { op: "concat", lhs: first, rhs: s });
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let total_len = out_shape[axis];
        let mut data = vec![0.0; numel(&out_shape)];
        let mut at = 0;
        {
            let nodes = self.nodes();
            for p in parts {
                let src = nodes[p.id].value.data();
                let len = nodes[p.id].value.shape()[axis];
                for o in 0..outer {
                    let dst = (o * total_len + at) * inner;
                    data[dst..dst + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
                }
                at += len;
            }
        }
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        let value = Tensor::new(out_shape, data)?;
        Ok(self.record(value, Op::Concat(ids.clone(), axis), &ids))
    }
}

fn binary_forward(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> TensorResult<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let out_shape = broadcast_shapes(a.shape(), b.shape()).ok_or_else(|| TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut data = vec![0.0; numel(&out_shape)];
    let (ad, bd) = (a.data(), b.data());
    for_each_offset(&out_shape, [&sa, &sb], |flat, [oa, ob]| {
        data[flat] = f(ad[oa], bd[ob]);
    });
    Tensor::new(out_shape, data)
}

/// Sums `grad` (shaped like `out`) down onto `target`'s broadcast shape,
/// weighting each element by `weight(other_offset)` when given.
fn reduce_broadcast(grad: &[f64], out: &[usize], target: &[usize], other: Option<(&[usize], &[f64])>) -> Vec<f64> {
    let mut acc = vec![0.0; numel(target)];
    match other {
        None if target == out => acc.copy_from_slice(grad),
        None => {
            let st = broadcast_strides(target, out);
            for_each_offset(out, [&st], |flat, [o]| acc[o] += grad[flat]);
        }
        Some((other_shape, other_data)) if target == out && other_shape == out => {
            for ((a, g), w) in acc.iter_mut().zip(grad).zip(other_data) {
                *a = g * w;
            }
        }
        Some((other_shape, other_data)) => {
            let st = broadcast_strides(target, out);
            let so = broadcast_strides(other_shape, out);
            for_each_offset(out, [&st, &so], |flat, [o, w]| {
                acc[o] += grad[flat] * other_data[w];
            });
        }
    }
    acc
}

/// Plain row-major `c += a[m,k] * b[k,p]`.
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let crow = &mut c[i * p..(i + 1) * p];
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * p..(kk + 1) * p];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `da += dc[m,p] * b[k,p]^T`
fn gemm_grad_a(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let drow = &dc[i * p..(i + 1) * p];
        for kk in 0..k {
            let brow = &b[kk * p..(kk + 1) * p];
            da[i * k + kk] += drow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `db += a[m,k]^T * dc[m,p]`
fn gemm_grad_b(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let drow = &dc[i * p..(i + 1) * p];
        for kk in 0..k {
            let av = a[i * k + kk];
            let dst = &mut db[kk * p..(kk + 1) * p];
            for (d, &g) in dst.iter_mut().zip(drow) {
                *d += av * g;
            }
        }
    }
}

struct MatmulPlan {
    m: usize,
    k: usize,
    p: usize,
    out_shape: Vec<usize>,
    batch: Vec<usize>,
    a_batch_strides: Vec<usize>,
    b_batch_strides: Vec<usize>,
}

fn matmul_plan(a: &[usize], b: &[usize]) -> TensorResult<MatmulPlan> {
    let mismatch = || TensorError::ShapeMismatch { op: "matmul", lhs: a.to_vec(), rhs: b.to_vec() };
    if a.len() < 2 || b.len() < 2 || a[a.len() - 1] != b[b.len() - 2] {
        return Err(mismatch());
    }
    let (k, p) = (b[b.len() - 2], b[b.len() - 1]);
    if b.len() == 2 {
        // Fold all of a's leading axes into the row count.
        let m = numel(&a[..a.len() - 1]);
        let mut out_shape = a[..a.len() - 1].to_vec();
        out_shape.push(p);
        return Ok(MatmulPlan { m, k, p, out_shape, batch: vec![], a_batch_strides: vec![], b_batch_strides: vec![] });
    }
    let m = a[a.len() - 2];
    let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let batch = broadcast_shapes(ab, bb).ok_or_else(mismatch)?;
    let scale = |s: Vec<usize>, size: usize| s.into_iter().map(|x| x * size).collect();
    let mut out_shape = batch.clone();
    out_shape.extend([m, p]);
    Ok(MatmulPlan {
        m,
        k,
        p,
        a_batch_strides: scale(broadcast_strides(ab, &batch), m * k),
        b_batch_strides: scale(broadcast_strides(bb, &batch), k * p),
        out_shape,
        batch,
    })
}

impl MatmulPlan {
    fn for_each_batch(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (m, p) = (self.m, self.p);
        for_each_offset(&self.batch, [&self.a_batch_strides, &self.b_batch_strides], |flat, [oa, ob]| {
            f(oa, ob, flat * m * p)
        });
    }
}

fn softmax_forward(x: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * n + i) * inner + j;
            let max = (0..n).map(|i| src[at(i)]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..n).map(|i| (src[at(i)] - max).exp()).sum();
            for i in 0..n {
                let shifted = src[at(i)] - max;
                out[at(i)] = if log { shifted - sum.ln() } else { shifted.exp() / sum };
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("softmax shape")
}

/// Correctly rounded sum of `values` (Shewchuk's partials), so the result
/// does not depend on the order of the inputs.
pub(crate) fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut kept = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        partials.truncate(kept);
        partials.push(x);
    }
    let Some(mut hi) = partials.pop() else { return 0.0 };
    let mut lo = 0.0;
    while let Some(y) = partials.pop() {
        let x = hi;
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    // Round half-even correction when the remaining partials push past a tie.
    if let Some(&next) = partials.last() {
        if (lo < 0.0 && next < 0.0) || (lo > 0.0 && next > 0.0) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
    }
    hi
}

/// Mean as `min + exact_sum(v - min) / n`: independent of input order and
/// exactly `v` when every input equals `v`.
fn order_free_mean(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let shift = values.clone().fold(f64::INFINITY, f64::min);
    if !shift.is_finite() {
        return values.sum::<f64>() / n;
    }
    shift + exact_sum(values.map(|v| v - shift)) / n
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    fn binary(self, other: Var<'t>, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> TensorResult<Var<'t>> {
        self.tape.same_tape(&[self, other]);
        let value = {
            let nodes = self.tape.nodes();
            binary_forward(name, &nodes[self.id].value, &nodes[other.id].value, f)?
        };
        Ok(self.tape.record(value, op, &[self.id, other.id]))
    }

    fn unary(self, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'t> {
        let value = f(&self.tape.nodes()[self.id].value);
        self.tape.record(value, op, &[self.id])
    }

    /// Elementwise sum with broadcasting.
    pub fn add(self, other: Var<'t>) -> TensorResult<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> TensorResult<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> TensorResult<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, factor), |x| x.map(|v| v * factor))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x.map(|v| v + c))
    }

    /// Batched matrix product over the last two axes. A rank-2 right
    /// operand is applied to every row of the left operand.
    pub fn matmul(self, other: Var<'t>) -> TensorResult<Var<'t>> {
        self.tape.same_tape(&[self, other]);
        let value = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let plan = matmul_plan(a.shape(), b.shape())?;
            let mut out = vec![0.0; numel(&plan.out_shape)];
            let (m, k, p) = (plan.m, plan.k, plan.p);
            if plan.batch.is_empty() {
                gemm_acc(a.data(), b.data(), &mut out, m, k, p);
            } else {
                plan.for_each_batch(|oa, ob, oc| {
                    gemm_acc(&a.data()[oa..oa + m * k], &b.data()[ob..ob + k * p], &mut out[oc..oc + m * p], m, k, p)
                });
            }
            Tensor::new(plan.out_shape, out)?
        };
        Ok(self.tape.record(value, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> TensorResult<Var<'t>> {
        let value = self.tape.nodes()[self.id].value.reshape(shape)?;
        Ok(self.tape.record(value, Op::Reshape(self.id), &[self.id]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> TensorResult<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            let rank = x.rank();
            let mut seen = vec![false; rank];
            if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
                return Err(TensorError::invalid("permute", format!("{perm:?} is not a permutation of rank {rank}")));
            }
            let in_strides = strides(x.shape());
            let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
            let read: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
            let mut out = vec![0.0; x.numel()];
            let src = x.data();
            for_each_offset(&out_shape, [&read], |flat, [o]| out[flat] = src[o]);
            Tensor::new(out_shape, out)?
        };
        Ok(self.tape.record(value, Op::Permute(self.id, perm.to_vec()), &[self.id]))
    }

    /// Swaps two axes.
    pub fn transpose(self, a: usize, b: usize) -> TensorResult<Var<'t>> {
        let rank = self.shape().len();
        check_axis("transpose", a.max(b), rank)?;
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> TensorResult<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            check_axis("slice", axis, x.rank())?;
            if start >= end || end > x.shape()[axis] {
                return Err(TensorError::invalid(
                    "slice",
                    format!("range {start}..{end} invalid for axis of length {}", x.shape()[axis]),
                ));
            }
            let (outer, n, inner) = axis_split(x.shape(), axis);
            let len = end - start;
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let from = (o * n + start) * inner;
                out.extend_from_slice(&x.data()[from..from + len * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = len;
            Tensor::new(shape, out)?
        };
        Ok(self.tape.record(value, Op::Slice { input: self.id, axis, start }, &[self.id]))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.map(|v| v.max(0.0)))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(self) -> Var<'t> {
        self.unary(Op::Gelu(self.id), |x| x.map(gelu))
    }

    pub fn softmax(self, axis: usize) -> TensorResult<Var<'t>> {
        check_axis("softmax", axis, self.shape().len())?;
        Ok(self.unary(Op::Softmax(self.id, axis), |x| softmax_forward(x, axis, false)))
    }

    pub fn log_softmax(self, axis: usize) -> TensorResult<Var<'t>> {
        check_axis("log_softmax", axis, self.shape().len())?;
        Ok(self.unary(Op::LogSoftmax(self.id, axis), |x| softmax_forward(x, axis, true)))
    }

    /// Normalizes over the last axis with population variance, then
    /// applies the per-channel affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> TensorResult<Var<'t>> {
        self.tape.same_tape(&[self, gamma, beta]);
        let (value, xhat, rstd) = {
            let nodes = self.tape.nodes();
            let (x, g, b) = (&nodes[self.id].value, &nodes[gamma.id].value, &nodes[beta.id].value);
            let c = *x.shape().last().ok_or_else(|| TensorError::invalid("layer_norm", "scalar input"))?;
            for p in [g, b] {
                if p.shape() != [c] {
                    return Err(TensorError::ShapeMismatch {
                        op: "layer_norm",
                        lhs: x.shape().to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                }
            }
            let rows = x.numel() / c;
            let mut out = vec![0.0; x.numel()];
            let mut xhat = vec![0.0; x.numel()];
            let mut rstd = vec![0.0; rows];
            for r in 0..rows {
                let row = &x.data()[r * c..(r + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                rstd[r] = inv;
                for i in 0..c {
                    let h = (row[i] - mean) * inv;
                    xhat[r * c + i] = h;
                    out[r * c + i] = h * g.data()[i] + b.data()[i];
                }
            }
            (Tensor::new(x.shape().to_vec(), out)?, xhat, rstd)
        };
        let op = Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, rstd };
        Ok(self.tape.record(value, op, &[self.id, gamma.id, beta.id]))
    }

    fn reduce_axis(self, axis: usize, keep: bool, mean: bool) -> TensorResult<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            check_axis(if mean { "mean" } else { "sum" }, axis, x.rank())?;
            let (outer, n, inner) = axis_split(x.shape(), axis);
            let mut out = vec![0.0; outer * inner];
            let src = x.data();
            for o in 0..outer {
                if mean {
                    for j in 0..inner {
                        let lane = (0..n).map(|i| src[(o * n + i) * inner + j]);
                        out[o * inner + j] = order_free_mean(lane);
                    }
                    continue;
                }
                for i in 0..n {
                    let row = &src[(o * n + i) * inner..(o * n + i + 1) * inner];
                    for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                        *d += s;
                    }
                }
            }
            let mut shape = x.shape().to_vec();
            if keep {
                shape[axis] = 1;
            } else {
                shape.remove(axis);
            }
            Tensor::new(shape, out)?
        };
        let op = if mean { Op::MeanAxis(self.id, axis) } else { Op::SumAxis(self.id, axis) };
        Ok(self.tape.record(value, op, &[self.id]))
    }

    pub fn sum_axis(self, axis: usize, keep: bool) -> TensorResult<Var<'t>> {
        self.reduce_axis(axis, keep, false)
    }

    pub fn mean_axis(self, axis: usize, keep: bool) -> TensorResult<Var<'t>> {
        self.reduce_axis(axis, keep, true)
    }

    /// Sum of every element, as a scalar.
    pub fn sum(self) -> Var<'t> {
        self.unary(Op::SumAll(self.id), |x| Tensor::scalar(x.sum()))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.tape.nodes()[self.id].value.numel();
        self.sum().scale(1.0 / n as f64)
    }

    /// Picks `x[b, indices[b]]` from a `[B, K]` tensor.
    pub fn gather(self, indices: &[usize]) -> TensorResult<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes();
            let x = &nodes[self.id].value;
            if x.rank() != 2 || x.shape()[0] != indices.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "gather",
                    lhs: x.shape().to_vec(),
                    rhs: vec![indices.len()],
                });
            }
            let k = x.shape()[1];
            if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
                return Err(TensorError::invalid("gather", format!("index {bad} >= {k}")));
            }
            let out = indices.iter().enumerate().map(|(b, &i)| x.data()[b * k + i]).collect();
            Tensor::new([indices.len()], out)?
        };
        Ok(self.tape.record(value, Op::Gather(self.id, indices.to_vec()), &[self.id]))
    }
}

/// Applies the backward rule of node `id` given its output gradient,
/// handing each input contribution to `emit`.
pub(crate) fn backward(nodes: &[Node], id: usize, g: &[f64], emit: &mut dyn FnMut(usize, Vec<f64>)) {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    let needs = |i: usize| nodes[i].requires_grad;
    let out_shape = node.value.shape();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sub = matches!(node.op, Op::Sub(..));
            if needs(*a) {
                emit(*a, reduce_broadcast(g, out_shape, val(*a).shape(), None));
            }
            if needs(*b) {
                let mut gb = reduce_broadcast(g, out_shape, val(*b).shape(), None);
                if sub {
                    gb.iter_mut().for_each(|v| *v = -*v);
                }
                emit(*b, gb);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if needs(*a) {
                emit(*a, reduce_broadcast(g, out_shape, va.shape(), Some((vb.shape(), vb.data()))));
            }
            if needs(*b) {
                emit(*b, reduce_broadcast(g, out_shape, vb.shape(), Some((va.shape(), va.data()))));
            }
        }
        Op::Scale(a, f) => emit(*a, g.iter().map(|v| v * f).collect()),
        Op::AddScalar(a) => emit(*a, g.to_vec()),
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let plan = matmul_plan(va.shape(), vb.shape()).expect("planned in forward");
            let (m, k, p) = (plan.m, plan.k, plan.p);
            let mut ga = needs(*a).then(|| vec![0.0; va.numel()]);
            let mut gb = needs(*b).then(|| vec![0.0; vb.numel()]);
            let mut step = |oa: usize, ob: usize, oc: usize| {
                let dc = &g[oc..oc + m * p];
                if let Some(ga) = ga.as_mut() {
                    gemm_grad_a(dc, &vb.data()[ob..ob + k * p], &mut ga[oa..oa + m * k], m, k, p);
                }
                if let Some(gb) = gb.as_mut() {
                    gemm_grad_b(&va.data()[oa..oa + m * k], dc, &mut gb[ob..ob + k * p], m, k, p);
                }
            };
            if plan.batch.is_empty() {
                step(0, 0, 0);
            } else {
                plan.for_each_batch(step);
            }
            if let Some(ga) = ga {
                emit(*a, ga);
            }
            if let Some(gb) = gb {
                emit(*b, gb);
            }
        }
        Op::Reshape(a) => emit(*a, g.to_vec()),
        Op::Permute(a, perm) => {
            let x = val(*a);
            let in_strides = strides(x.shape());
            let read: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
            let mut gx = vec![0.0; x.numel()];
            for_each_offset(out_shape, [&read], |flat, [o]| gx[o] += g[flat]);
            emit(*a, gx);
        }
        Op::Concat(parts, axis) => {
            let (outer, total, inner) = axis_split(out_shape, *axis);
            let mut at = 0;
            for &p in parts {
                let len = val(p).shape()[*axis];
                if needs(p) {
                    let mut gp = Vec::with_capacity(val(p).numel());
                    for o in 0..outer {
                        let from = (o * total + at) * inner;
                        gp.extend_from_slice(&g[from..from + len * inner]);
                    }
                    emit(p, gp);
                }
                at += len;
            }
        }
        Op::Slice { input, axis, start } => {
            let x = val(*input);
            let (outer, n, inner) = axis_split(x.shape(), *axis);
            let len = out_shape[*axis];
            let mut gx = vec![0.0; x.numel()];
            for o in 0..outer {
                let to = (o * n + start) * inner;
                gx[to..to + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            emit(*input, gx);
        }
        Op::Relu(a) => {
            let x = val(*a).data();
            emit(*a, g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect());
        }
        Op::Gelu(a) => {
            let x = val(*a).data();
            emit(*a, g.iter().zip(x).map(|(g, &x)| g * gelu_grad(x)).collect());
        }
        Op::Softmax(a, axis) | Op::LogSoftmax(a, axis) => {
            let log = matches!(node.op, Op::LogSoftmax(..));
            let y = node.value.data();
            let (outer, n, inner) = axis_split(out_shape, *axis);
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let at = |i: usize| (o * n + i) * inner + j;
                    if log {
                        let gsum: f64 = (0..n).map(|i| g[at(i)]).sum();
                        for i in 0..n {
                            gx[at(i)] = g[at(i)] - y[at(i)].exp() * gsum;
                        }
                    } else {
                        let dot: f64 = (0..n).map(|i| g[at(i)] * y[at(i)]).sum();
                        for i in 0..n {
                            gx[at(i)] = y[at(i)] * (g[at(i)] - dot);
                        }
                    }
                }
            }
            emit(*a, gx);
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let c = *out_shape.last().expect("rank >= 1");
            let rows = rstd.len();
            let gam = val(*gamma).data();
            if needs(*x) {
                let mut gx = vec![0.0; g.len()];
                for r in 0..rows {
                    let span = r * c..(r + 1) * c;
                    let (gr, hr) = (&g[span.clone()], &xhat[span.clone()]);
                    let dh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                    let mean_dh = dh.iter().sum::<f64>() / c as f64;
                    let mean_dhh = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for i in 0..c {
                        gx[r * c + i] = rstd[r] * (dh[i] - mean_dh - hr[i] * mean_dhh);
                    }
                }
                emit(*x, gx);
            }
            if needs(*gamma) {
                let mut gg = vec![0.0; c];
                for (i, (gv, hv)) in g.iter().zip(xhat).enumerate() {
                    gg[i % c] += gv * hv;
                }
                emit(*gamma, gg);
            }
            if needs(*beta) {
                let mut gb = vec![0.0; c];
                for (i, gv) in g.iter().enumerate() {
                    gb[i % c] += gv;
                }
                emit(*beta, gb);
            }
        }
        Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
            let x = val(*a);
            let (outer, n, inner) = axis_split(x.shape(), *axis);
            let w = if matches!(node.op, Op::MeanAxis(..)) { 1.0 / n as f64 } else { 1.0 };
            let mut gx = vec![0.0; x.numel()];
            for o in 0..outer {
                for i in 0..n {
                    let dst = &mut gx[(o * n + i) * inner..(o * n + i + 1) * inner];
                    for (d, s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                        *d = s * w;
                    }
                }
            }
            emit(*a, gx);
        }
        Op::SumAll(a) => emit(*a, vec![g[0]; val(*a).numel()]),
        Op::Gather(a, indices) => {
            let k = val(*a).shape()[1];
            let mut gx = vec![0.0; val(*a).numel()];
            for (b, &i) in indices.iter().enumerate() {
                gx[b * k + i] += g[b];
            }
            emit(*a, gx);
        }
        Op::Custom(inputs, rule) => {
            let values: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
            let flags: Vec<bool> = inputs.iter().map(|&i| needs(i)).collect();
            let grads = rule.backward(&values, &node.value, g, &flags);
            for ((&i, gi), need) in inputs.iter().zip(grads).zip(flags) {
                if let (Some(gi), true) = (gi, need) {
                    debug_assert_eq!(gi.len(), val(i).numel(), "{} grad length", rule.name());
                    emit(i, gi);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small_cases() {
        let tape = Tape::new();
        let eye = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.constant(t(&[2, 2], &[3., 4., 5., 6.]));
        assert_eq!(eye.matmul(m).unwrap().value().data(), &[3., 4., 5., 6.]);
        let row = tape.constant(t(&[1, 2], &[1., 2.]));
        let col = tape.constant(t(&[2, 1], &[3., 4.]));
        assert_eq!(row.matmul(col).unwrap().value().data(), &[11.]);
        let err = row.matmul(row).unwrap_err();
        assert!(err.to_string().contains("[1, 2]"), "{err}");
    }

    #[test]
    fn batched_matmul_broadcasts_leading_axes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_fn([2, 3, 4], |i| i as f64));
        let b = tape.constant(Tensor::from_fn([1, 4, 2], |i| (i % 3) as f64));
        let c = a.matmul(b).unwrap().value();
        assert_eq!(c.shape(), &[2, 3, 2]);
        let (av, bv) = (a.value(), b.value());
        for n in 0..2 {
            for i in 0..3 {
                for j in 0..2 {
                    let want: f64 = (0..4).map(|k| av.get(&[n, i, k]) * bv.get(&[0, k, j])).sum();
                    assert_eq!(c.get(&[n, i, j]), want);
                }
            }
        }
    }

    #[test]
    fn softmax_cases() {
        let tape = Tape::new();
        let y = tape.constant(t(&[3], &[0., 0., 0.])).softmax(0).unwrap().value();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = tape.constant(t(&[2], &[1000., 0.])).softmax(0).unwrap().value();
        assert!(y.is_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && y.data()[1] < 1e-12);
        assert!(tape.constant(t(&[2], &[1., 2.])).softmax(1).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let tape = Tape::new();
        let ones = tape.constant(Tensor::ones([4]));
        let zeros = tape.constant(Tensor::zeros([4]));
        let y = tape.constant(Tensor::full([4], 2.5)).layer_norm(ones, zeros, 1e-5).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let g = tape.constant(Tensor::ones([2]));
        let b = tape.constant(Tensor::zeros([2]));
        let y = tape.constant(t(&[2], &[1., 3.])).layer_norm(g, b, 0.0).unwrap().value();
        assert_eq!(y.data(), &[-1., 1.]);
    }

    #[test]
    fn mean_axis_cases() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 4, 1], &[1., 2., 3., 4.]));
        let m = x.mean_axis(1, true).unwrap().value();
        assert_eq!(m.shape(), &[1, 1, 1]);
        assert_eq!(m.data(), &[2.5]);
        let single = tape.constant(t(&[2, 1, 3], &[1., 2., 3., 4., 5., 6.]));
        assert_eq!(single.mean_axis(1, true).unwrap().value(), single.value());
        assert_eq!(x.mean_axis(1, false).unwrap().shape(), vec![1, 1]);
    }

    #[test]
    fn backward_basic_contracts() {
        let tape = Tape::new();
        let w = tape.leaf(t(&[3], &[1., 2., 3.]));
        let root = w.mul(w).unwrap().sum();
        tape.backward(root).unwrap();
        assert_eq!(w.grad().unwrap().data(), &[2., 4., 6.]);
        tape.backward(root).unwrap();
        assert_eq!(w.grad().unwrap().data(), &[4., 8., 12.]);
        tape.zero_grad();
        assert!(w.grad().is_none());

        let c = tape.constant(t(&[2], &[1., 2.])).sum();
        tape.backward(c).unwrap();

        assert!(matches!(tape.backward(w), Err(TensorError::NonScalarRoot(_))));
        let other = Tape::new();
        let foreign = other.leaf(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(foreign), Err(TensorError::DetachedRoot)));
    }

    #[test]
    fn concat_slice_and_gather() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_fn([2, 2, 3], |i| i as f64));
        let b = tape.constant(Tensor::from_fn([2, 1, 3], |i| 100.0 + i as f64));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 3, 3]);
        assert_eq!(c.slice(1, 0, 2).unwrap().value(), a.value());
        assert_eq!(c.slice(1, 2, 3).unwrap().value(), b.value());
        assert!(tape.concat(&[a, tape.constant(Tensor::zeros([2, 2, 4]))], 1).is_err());

        let x = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        assert_eq!(x.gather(&[2, 0]).unwrap().value().data(), &[3., 4.]);
        assert!(x.gather(&[3, 0]).is_err());
    }

    #[test]
    fn exact_sum_is_order_free() {
        let v = [1e16, 1.0, -1e16, 3.0, 1e-3, 0.1, 0.2];
        let mut rev = v;
        rev.reverse();
        assert_eq!(exact_sum(v), exact_sum(rev));
        assert_eq!(exact_sum([1e16, 1.0, -1e16]), 1.0);
        assert_eq!(exact_sum([0.1; 10]), 1.0);
        assert_eq!(order_free_mean([0.1; 7].into_iter()), 0.1);
    }

    #[test]
    fn transpose_roundtrip() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([2, 3, 4], |i| i as f64));
        let y = x.transpose(0, 2).unwrap();
        assert_eq!(y.shape(), vec![4, 3, 2]);
        assert_eq!(y.value().get(&[3, 1, 0]), x.value().get(&[0, 1, 3]));
        assert_eq!(y.transpose(0, 2).unwrap().value(), x.value());
        assert!(x.permute(&[0, 0, 1]).is_err());
    }
}
