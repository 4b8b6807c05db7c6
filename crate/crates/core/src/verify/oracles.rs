//! Reference implementations written from the definitions with plain
//! loops. Nothing here calls the production kernels.

use crate::nn::{Activation, Conv2dSpec};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Direct-summation cross-correlation:
/// `y[n,o,i,j] = b[o] + sum_{c,u,v} x[n,c,i*s+u*d-p, j*s+v*d-p] * w[o,c,u,v]`,
/// with out-of-range input taps reading zero.
pub fn naive_conv2d(x: &Tensor, w: &Tensor, b: &Tensor, spec: &Conv2dSpec) -> Result<Tensor> {
    let bad = |msg: String| Err(Error::Invalid(format!("naive_conv2d: {msg}")));
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let (dh, dw) = spec.dilation;
    if [kh, kw, sh, sw, dh, dw, spec.in_channels, spec.out_channels].contains(&0) {
        return bad(format!("zero field in {spec:?}"));
    }
    if x.rank() != 4 || x.shape()[1] != spec.in_channels {
        return bad(format!("input shape {:?}", x.shape()));
    }
    if w.shape() != [spec.out_channels, spec.in_channels, kh, kw] || b.shape() != [spec.out_channels] {
        return bad(format!("weight {:?} / bias {:?}", w.shape(), b.shape()));
    }
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let span_h = dh * (kh - 1) + 1;
    let span_w = dw * (kw - 1) + 1;
    if h + 2 * ph < span_h || wd + 2 * pw < span_w {
        return bad(format!("input {h}x{wd} smaller than kernel span {span_h}x{span_w}"));
    }
    let oh = (h + 2 * ph - span_h) / sh + 1;
    let ow = (wd + 2 * pw - span_w) / sw + 1;
    let o = spec.out_channels;
    let mut y = vec![0.0; n * o * oh * ow];
    for bi in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.data()[oc];
                    for ci in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let r = (i * sh + u * dh) as isize - ph as isize;
                                let q = (j * sw + v * dw) as isize - pw as isize;
                                if r < 0 || q < 0 || r >= h as isize || q >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((bi * c + ci) * h + r as usize) * wd + q as usize];
                                let wv = w.data()[((oc * c + ci) * kh + u) * kw + v];
                                acc += xv * wv;
                            }
                        }
                    }
                    y[((bi * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Ok(Tensor::new([n, o, oh, ow], y)?)
}

fn act(a: Activation, v: f64) -> f64 {
    match a {
        Activation::Relu => v.max(0.0),
        Activation::Gelu => 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)),
    }
}

/// Dense layer weights `w [din, dout]`, `b [dout]`.
pub type Dense<'a> = (&'a Tensor, &'a Tensor);

fn dense(x: &[f64], (w, b): Dense<'_>) -> Vec<f64> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    (0..dout).map(|o| b.data()[o] + (0..din).map(|i| x[i] * w.data()[i * dout + o]).sum::<f64>()).collect()
}

/// `fc2(act(fc1(v)))` for one token vector.
pub fn naive_token_mlp(v: &[f64], fc1: Dense<'_>, fc2: Dense<'_>, a: Activation) -> Vec<f64> {
    let hidden: Vec<f64> = dense(v, fc1).into_iter().map(|z| act(a, z)).collect();
    dense(&hidden, fc2)
}

/// Two-branch MLP over `[B, N, C]`: each token's own MLP output plus the
/// MLP (through `global`) of the token average, computed token by token.
pub fn naive_two_branch_mlp(
    x: &Tensor,
    fc1: Dense<'_>,
    fc2: Dense<'_>,
    global: (Dense<'_>, Dense<'_>),
    a: Activation,
) -> Tensor {
    let (bsz, n, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let dout = fc2.0.shape()[1];
    let mut out = Vec::with_capacity(bsz * n * dout);
    for bi in 0..bsz {
        let token = |t: usize| &x.data()[(bi * n + t) * c..(bi * n + t + 1) * c];
        let mut avg = vec![0.0; c];
        for t in 0..n {
            for (acc, v) in avg.iter_mut().zip(token(t)) {
                *acc += v;
            }
        }
        avg.iter_mut().for_each(|v| *v /= n as f64);
        let g = naive_token_mlp(&avg, global.0, global.1, a);
        for t in 0..n {
            let local = naive_token_mlp(token(t), fc1, fc2, a);
            out.extend(local.iter().zip(&g).map(|(l, g)| l + g));
        }
    }
    Tensor::new([bsz, n, dout], out).expect("mlp output shape")
}
