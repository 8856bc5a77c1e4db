use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Bilinear resize of a `[H, W]` map with half-pixel centers: output cell `i`
/// samples source coordinate `(i + 0.5)·H/out_h − 0.5`, clamped to the border.
pub fn bilinear_resize<T: Scalar>(map: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    map.expect_rank("bilinear_resize", 2)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target must be positive, got {out_h}x{out_w}"
        )));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let ys: Vec<_> = (0..out_h).map(|i| taps(i, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|j| taps(j, w, out_w)).collect();
    let src = map.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let (fy, fx) = (T::from_f64(fy), T::from_f64(fx));
            let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
            out.push(top * (T::one() - fy) + bottom * fy);
        }
    }
    Tensor::from_vec(vec![out_h, out_w], out)
}

fn taps(i: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    let pos = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src - 1);
    (lo, hi, pos - lo as f64)
}
