use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Flat input offsets of the maxima chosen by [`maxpool2`].
#[derive(Clone, Debug, PartialEq)]
pub struct PoolIndices {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

/// 2×2 non-overlapping max pooling. Ties resolve to the first element in
/// scan order (top-left, top-right, bottom-left, bottom-right).
pub fn maxpool2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let (n, c, h, w) = input.dims4("maxpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "maxpool2 needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for cand in [top + 1, top + w, top + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::from_vec(vec![n, c, oh, ow], out)?,
        PoolIndices {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool2_backward<T: Scalar>(grad_out: &Tensor<T>, indices: &PoolIndices) -> Result<Tensor<T>> {
    if grad_out.len() != indices.argmax.len() {
        return Err(Error::InvalidArgument(format!(
            "maxpool2_backward: grad has {} elements, pooling recorded {}",
            grad_out.len(),
            indices.argmax.len()
        )));
    }
    let mut grad = Tensor::zeros(&indices.input_shape);
    let g = grad.data_mut();
    for (&idx, &v) in indices.argmax.iter().zip(grad_out.data()) {
        g[idx] = g[idx] + v;
    }
    Ok(grad)
}

/// Global average pooling `[N, C, H, W] -> [N, C]`.
pub fn gap<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("gap")?;
    let area = T::from_f64((h * w) as f64);
    let data = input
        .data()
        .chunks_exact(h * w)
        .map(|plane| plane.iter().fold(T::zero(), |acc, &v| acc + v) / area)
        .collect();
    Tensor::from_vec(vec![n, c], data)
}

/// Spreads each `grad[n, c]` uniformly as `grad / (H·W)` over its map.
pub fn gap_backward<T: Scalar>(grad: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    if input_shape.len() != 4 {
        return Err(Error::InvalidArgument(format!(
            "gap_backward needs a rank-4 input shape, got {input_shape:?}"
        )));
    }
    if grad.shape() != [input_shape[0], input_shape[1]] {
        return Err(Error::shape("gap_backward", &input_shape[..2], grad.shape()));
    }
    let area = input_shape[2] * input_shape[3];
    let scale = T::from_f64(area as f64);
    let mut data = Vec::with_capacity(grad.len() * area);
    for &g in grad.data() {
        data.extend(std::iter::repeat_n(g / scale, area));
    }
    Tensor::from_vec(input_shape.to_vec(), data)
}
