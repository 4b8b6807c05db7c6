//! 2-D cross-correlation with stride, zero padding and dilation (atrous
//! rate), recorded on the tape as a single op.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{init, Forward};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{CustomBackward, Tensor, TensorError, TensorResult, Var};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

impl Conv2dSpec {
    /// Square kernel, unit stride and dilation, no padding.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Conv2dSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = (d, d);
        self
    }

    /// Span of input pixels covered by one kernel application, per axis.
    pub fn effective_extent(&self) -> (usize, usize) {
        (self.dilation.0 * (self.kernel.0 - 1) + 1, self.dilation.1 * (self.kernel.1 - 1) + 1)
    }

    pub fn validate(&self) -> TensorResult<()> {
        let positive = [
            self.in_channels,
            self.out_channels,
            self.kernel.0,
            self.kernel.1,
            self.stride.0,
            self.stride.1,
            self.dilation.0,
            self.dilation.1,
        ];
        if positive.contains(&0) {
            return Err(TensorError::invalid("conv2d", format!("non-positive field in {self:?}")));
        }
        Ok(())
    }

    /// `floor((in + 2p - extent) / s) + 1` per axis; errors when it would be < 1.
    pub fn output_size(&self, h: usize, w: usize) -> TensorResult<(usize, usize)> {
        self.validate()?;
        let (eh, ew) = self.effective_extent();
        let axis = |n: usize, p: usize, e: usize, s: usize| {
            let padded = n + 2 * p;
            (padded >= e).then(|| (padded - e) / s + 1)
        };
        match (axis(h, self.padding.0, eh, self.stride.0), axis(w, self.padding.1, ew, self.stride.1)) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(TensorError::invalid(
                "conv2d",
                format!("input {h}x{w} too small for extent {eh}x{ew} with padding {:?}", self.padding),
            )),
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel.0, self.kernel.1]
    }

    /// Multiply-accumulates of one forward pass over a `h x w` input.
    pub fn macs(&self, h: usize, w: usize) -> TensorResult<u64> {
        let (oh, ow) = self.output_size(h, w)?;
        Ok((oh * ow * self.out_channels * self.in_channels * self.kernel.0 * self.kernel.1) as u64)
    }
}

/// Output positions `o` with `0 <= o * stride + offset < len`.
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> std::ops::Range<usize> {
    let (s, n) = (stride as isize, in_len as isize);
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let hi = if n - 1 - offset < 0 { 0 } else { (n - 1 - offset) / s + 1 };
    let hi = (hi as usize).min(out_len);
    (lo as usize).min(hi)..hi
}

struct Geometry {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    spec: Conv2dSpec,
}

impl Geometry {
    fn new(x: &[usize], w: &[usize], b: &[usize], spec: Conv2dSpec) -> TensorResult<Self> {
        let mismatch = |rhs: &[usize]| TensorError::ShapeMismatch { op: "conv2d", lhs: x.to_vec(), rhs: rhs.to_vec() };
        if x.len() != 4 || x[1] != spec.in_channels {
            return Err(mismatch(&[spec.in_channels]));
        }
        if w != spec.weight_shape() {
            return Err(mismatch(w));
        }
        if b != [spec.out_channels] {
            return Err(mismatch(b));
        }
        let (oh, ow) = spec.output_size(x[2], x[3])?;
        Ok(Geometry { batch: x[0], cin: x[1], cout: spec.out_channels, h: x[2], w: x[3], oh, ow, spec })
    }

    fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.cout, self.oh, self.ow]
    }

    /// Calls `f(x_plane, out_plane, weight_index, rows, cols, ih0, iw0)` for
    /// every (batch, out-channel, in-channel, tap) combination with the
    /// in-bounds output window of that tap.
    fn taps(&self, mut f: impl FnMut(usize, usize, usize, &TapWindow)) {
        let Conv2dSpec { kernel: (kh, kw), stride: (sh, sw), padding: (ph, pw), dilation: (dh, dw), .. } = self.spec;
        for b in 0..self.batch {
            for o in 0..self.cout {
                let out_plane = (b * self.cout + o) * self.oh * self.ow;
                for c in 0..self.cin {
                    let x_plane = (b * self.cin + c) * self.h * self.w;
                    for u in 0..kh {
                        let row_off = (u * dh) as isize - ph as isize;
                        let rows = valid_range(self.oh, self.h, sh, row_off);
                        for v in 0..kw {
                            let col_off = (v * dw) as isize - pw as isize;
                            let cols = valid_range(self.ow, self.w, sw, col_off);
                            let window = TapWindow { rows: rows.clone(), cols, row_off, col_off };
                            f(x_plane, out_plane, ((o * self.cin + c) * kh + u) * kw + v, &window);
                        }
                    }
                }
            }
        }
    }
}

struct TapWindow {
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    row_off: isize,
    col_off: isize,
}

impl TapWindow {
    /// Pairs of (output offset, input offset) within the planes.
    #[inline]
    fn for_each(&self, g: &Geometry, mut f: impl FnMut(usize, usize)) {
        let (sh, sw) = g.spec.stride;
        for i in self.rows.clone() {
            let ih = (i * sh) as isize + self.row_off;
            let in_row = ih as usize * g.w;
            let out_row = i * g.ow;
            for j in self.cols.clone() {
                let iw = ((j * sw) as isize + self.col_off) as usize;
                f(out_row + j, in_row + iw);
            }
        }
    }
}

struct Conv2dBackward {
    spec: Conv2dSpec,
}

impl CustomBackward for Conv2dBackward {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let geo = Geometry::new(x.shape(), w.shape(), inputs[2].shape(), self.spec).expect("checked in forward");
        let mut gx = needs[0].then(|| vec![0.0; x.numel()]);
        let mut gw = needs[1].then(|| vec![0.0; w.numel()]);
        if gx.is_some() || gw.is_some() {
            let (xd, wd) = (x.data(), w.data());
            geo.taps(|x_plane, out_plane, widx, win| {
                let wv = wd[widx];
                let mut acc = 0.0;
                win.for_each(&geo, |o, i| {
                    let gv = grad[out_plane + o];
                    if let Some(gx) = gx.as_mut() {
                        gx[x_plane + i] += wv * gv;
                    }
                    acc += gv * xd[x_plane + i];
                });
                if let Some(gw) = gw.as_mut() {
                    gw[widx] += acc;
                }
            });
        }
        let gb = needs[2].then(|| {
            let plane = geo.oh * geo.ow;
            let mut gb = vec![0.0; geo.cout];
            for (k, chunk) in grad.chunks(plane).enumerate() {
                gb[k % geo.cout] += chunk.iter().sum::<f64>();
            }
            gb
        });
        vec![gx, gw, gb]
    }
}

/// `out[b,o,i,j] = bias[o] + sum_{c,u,v} x[b,c,i*s+u*d-p, j*s+v*d-p] * w[o,c,u,v]`,
/// reading zeros outside the input.
pub fn conv2d<'t>(x: Var<'t>, weight: Var<'t>, bias: Var<'t>, spec: &Conv2dSpec) -> TensorResult<Var<'t>> {
    let (xv, wv, bv) = (x.value(), weight.value(), bias.value());
    let geo = Geometry::new(xv.shape(), wv.shape(), bv.shape(), *spec)?;
    let plane = geo.oh * geo.ow;
    let mut out = vec![0.0; geo.batch * geo.cout * plane];
    for (k, chunk) in out.chunks_mut(plane).enumerate() {
        chunk.fill(bv.data()[k % geo.cout]);
    }
    let (xd, wd) = (xv.data(), wv.data());
    geo.taps(|x_plane, out_plane, widx, win| {
        let w = wd[widx];
        win.for_each(&geo, |o, i| out[out_plane + o] += w * xd[x_plane + i]);
    });
    let value = Tensor::new(geo.out_shape(), out)?;
    Ok(x.tape().custom(&[x, weight, bias], value, Box::new(Conv2dBackward { spec: *spec })))
}

/// Convolution layer owning `<prefix>.weight` and `<prefix>.bias`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub spec: Conv2dSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv2d {
    /// Kaiming-uniform weights over the fan-in, zero bias.
    pub fn new(store: &mut ParamStore, prefix: &str, spec: Conv2dSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let fan_in = spec.in_channels * spec.kernel.0 * spec.kernel.1;
        let weight =
            store.register(format!("{prefix}.weight"), init::kaiming_uniform(spec.weight_shape(), fan_in, rng))?;
        let bias = store.register(format!("{prefix}.bias"), Tensor::zeros([spec.out_channels]))?;
        Ok(Conv2d { spec, weight, bias })
    }

    pub fn forward<'t>(&self, f: &Forward<'_, 't>, x: Var<'t>) -> TensorResult<Var<'t>> {
        conv2d(x, f.param(self.weight), f.param(self.bias), &self.spec)
    }

    pub fn param_count(&self) -> usize {
        self.spec.weight_shape().iter().product::<usize>() + self.spec.out_channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn output_size_formula() {
        let s = Conv2dSpec::new(3, 8, 7).stride(2).padding(3);
        assert_eq!(s.output_size(32, 32).unwrap(), (16, 16));
        let atrous = Conv2dSpec::new(4, 4, 3).padding(3).dilation(3);
        assert_eq!(atrous.effective_extent(), (7, 7));
        assert_eq!(atrous.output_size(9, 9).unwrap(), (9, 9));
        assert!(Conv2dSpec::new(1, 1, 3).dilation(4).output_size(8, 8).is_err());
        assert!(Conv2dSpec::new(1, 1, 3).dilation(0).validate().is_err());
    }

    #[test]
    fn valid_range_edges() {
        assert_eq!(valid_range(5, 5, 1, -1), 1..5);
        assert_eq!(valid_range(5, 5, 1, 1), 0..4);
        assert_eq!(valid_range(3, 6, 2, -3), 2..3);
        assert_eq!(valid_range(4, 2, 1, 5), 0..0);
    }

    #[test]
    fn ones_kernel_counts_overlap() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let w = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros([1]));
        let y = conv2d(x, w, b, &Conv2dSpec::new(1, 1, 3).padding(1)).unwrap().value();
        assert_eq!(y.get(&[0, 0, 1, 1]), 9.0);
        for (i, j) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.get(&[0, 0, i, j]), 4.0);
        }
        assert_eq!(y.get(&[0, 0, 0, 1]), 6.0);
    }

    #[test]
    fn zero_kernel_gives_bias_and_zero_dx() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn([2, 2, 5, 5], |i| (i as f64).sin()));
        let w = tape.leaf(Tensor::zeros([3, 2, 3, 3]));
        let b = tape.leaf(Tensor::full([3], 1.5));
        let spec = Conv2dSpec::new(2, 3, 3).padding(2).dilation(2);
        let y = conv2d(x, w, b, &spec).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 1.5));
        let g = Tensor::from_fn(y.shape(), |i| (i % 7) as f64 - 3.0);
        let loss = y.mul(y.tape().constant(g.clone())).unwrap().sum();
        x.tape().backward(loss).unwrap();
        assert!(x.grad().unwrap().data().iter().all(|&v| v == 0.0));
        // bias grad is the output grad summed over batch and space
        let plane = 25;
        let want: Vec<f64> = (0..3)
            .map(|o| {
                (0..2).map(|bi| g.data()[(bi * 3 + o) * plane..(bi * 3 + o + 1) * plane].iter().sum::<f64>()).sum()
            })
            .collect();
        let got = b.grad().unwrap();
        for (a, e) in got.data().iter().zip(&want) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones([1, 2, 4, 4]));
        let w = tape.constant(Tensor::ones([1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros([1]));
        assert!(conv2d(x, w, b, &Conv2dSpec::new(3, 1, 3)).is_err());
        assert!(conv2d(x, w, b, &Conv2dSpec::new(2, 1, 3)).is_err());
    }
}
