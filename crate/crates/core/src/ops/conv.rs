use std::borrow::Cow;

use super::gemm::{gemm_acc, transpose};
use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{Scalar, Tensor};

/// Square 2-D convolution with weights `[out_ch, in_ch, k, k]` and bias `[out_ch]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        let layer = Self {
            weight,
            bias,
            stride,
            pad,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn zeros(out_ch: usize, in_ch: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        Self::new(
            Tensor::zeros(&[out_ch, in_ch, kernel, kernel]),
            Tensor::zeros(&[out_ch]),
            stride,
            pad,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.weight.shape();
        if s.len() != 4 || s[2] != s[3] || !(s[2] == 1 || s[2] == 3) {
            return Err(Error::InvalidArgument(format!(
                "conv weight must be [out, in, k, k] with k in {{1, 3}}, got {s:?}"
            )));
        }
        if self.bias.shape() != [s[0]] {
            return Err(Error::shape("conv2d bias", &[s[0]], self.bias.shape()));
        }
        if self.stride == 0 {
            return Err(Error::InvalidArgument("conv stride must be positive".into()));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel();
        let span = |x: usize| {
            let padded = x + 2 * self.pad;
            if padded < k || !(padded - k).is_multiple_of(self.stride) {
                None
            } else {
                Some((padded - k) / self.stride + 1)
            }
        };
        match (span(h), span(w)) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::InvalidArgument(format!(
                "conv geometry (k={k}, stride={}, pad={}) does not tile a {h}x{w} input",
                self.stride, self.pad
            ))),
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kernel() == 1 && self.stride == 1 && self.pad == 0
    }
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn geometry<T: Scalar>(input: &Tensor<T>, layer: &Conv2d<T>) -> Result<(usize, Geometry)> {
    layer.validate()?;
    let (n, c, h, w) = input.dims4("conv2d")?;
    if c != layer.in_channels() {
        return Err(Error::ShapeMismatch {
            op: "conv2d input channels",
            expected: layer.weight.shape().to_vec(),
            actual: input.shape().to_vec(),
        });
    }
    let (oh, ow) = layer.output_size(h, w)?;
    Ok((
        n,
        Geometry {
            cin: c,
            h,
            w,
            k: layer.kernel(),
            stride: layer.stride,
            pad: layer.pad,
            oh,
            ow,
        },
    ))
}

/// Unfolds one sample `[cin, h, w]` into `[cin·k·k, oh·ow]`, rows ordered
/// `(ci, ky, kx)` to match the weight layout. Padding reads as zero.
fn im2col<T: Scalar>(x: &[T], g: &Geometry) -> Vec<T> {
    let p = g.cols();
    let mut cols = vec![T::zero(); g.rows() * p];
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &Geometry) -> Vec<T> {
    let p = g.cols();
    let mut x = vec![T::zero(); g.cin * g.h * g.w];
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn unfold<'a, T: Scalar>(x: &'a [T], layer: &Conv2d<T>, g: &Geometry) -> Cow<'a, [T]> {
    if layer.is_pointwise() {
        Cow::Borrowed(x)
    } else {
        Cow::Owned(im2col(x, g))
    }
}

/// Each output element is `bias + Σ_(ci,ky,kx) w·x` accumulated in that order
/// over the zero-padded receptive field.
pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, layer: &Conv2d<T>) -> Result<Tensor<T>> {
    let (n, g) = geometry(input, layer)?;
    let cout = layer.out_channels();
    let p = g.cols();
    let per_sample = parallel::map_indexed(n, |i| {
        let cols = unfold(input.outer(i), layer, &g);
        let mut out = Vec::with_capacity(cout * p);
        for &b in layer.bias.data() {
            out.extend(std::iter::repeat_n(b, p));
        }
        gemm_acc(cout, p, g.rows(), layer.weight.data(), &cols, &mut out);
        out
    });
    Tensor::from_vec(vec![n, cout, g.oh, g.ow], per_sample.concat())
}

/// Gradients of `Σ grad_out ⊙ conv2d_forward(input)` with respect to the
/// input, weights and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    layer: &Conv2d<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    backward(input, layer, grad_out, true)
}

/// Like [`conv2d_backward`] but skips the input gradient (first layer).
pub fn conv2d_backward_params<T: Scalar>(
    input: &Tensor<T>,
    layer: &Conv2d<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    backward(input, layer, grad_out, false)
}

fn backward<T: Scalar>(
    input: &Tensor<T>,
    layer: &Conv2d<T>,
    grad_out: &Tensor<T>,
    want_input: bool,
) -> Result<ConvGrads<T>> {
    let (n, g) = geometry(input, layer)?;
    let cout = layer.out_channels();
    let expected = [n, cout, g.oh, g.ow];
    if grad_out.shape() != expected {
        return Err(Error::shape("conv2d_backward grad_out", &expected, grad_out.shape()));
    }
    let p = g.cols();
    let kd = g.rows();
    let wt = want_input.then(|| transpose(cout, kd, layer.weight.data()));

    let per_sample = parallel::map_indexed(n, |i| {
        let cols = unfold(input.outer(i), layer, &g);
        let go = grad_out.outer(i);

        let gb: Vec<T> = go.chunks_exact(p).map(|row| row.iter().copied().sum()).collect();

        let cols_t = transpose(kd, p, &cols);
        let mut gw = vec![T::zero(); cout * kd];
        gemm_acc(cout, kd, p, go, &cols_t, &mut gw);

        let gx = wt.as_ref().map(|wt| {
            let mut gcols = vec![T::zero(); kd * p];
            gemm_acc(kd, p, cout, wt, go, &mut gcols);
            if layer.is_pointwise() {
                gcols
            } else {
                col2im(&gcols, &g)
            }
        });
        (gx, gw, gb)
    });

    let mut weight = layer.weight.zeros_like();
    let mut bias = layer.bias.zeros_like();
    let mut gx_all = want_input.then(|| Vec::with_capacity(input.len()));
    for (gx, gw, gb) in per_sample {
        for (a, b) in weight.data_mut().iter_mut().zip(gw) {
            *a = *a + b;
        }
        for (a, b) in bias.data_mut().iter_mut().zip(gb) {
            *a = *a + b;
        }
        if let (Some(all), Some(gx)) = (gx_all.as_mut(), gx) {
            all.extend(gx);
        }
    }
    let input_grad = match gx_all {
        Some(d) => Some(Tensor::from_vec(input.shape().to_vec(), d)?),
        None => None,
    };
    Ok(ConvGrads {
        input: input_grad,
        weight,
        bias,
    })
}
