//! Localization-map algebra: selecting class maps from the 1×1-conv head,
//! post-hoc CAM from GAP→FC weights, min-max normalization and max fusion.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ops::{conv2d_forward, gap, Conv2d};
use crate::tensor::{Scalar, Tensor};

/// One spatial map `[H, W]` for a single category.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationMap<T> {
    pub grid: Tensor<T>,
    pub category: usize,
    pub normalized: bool,
}

/// Channel `category` of sample `sample` from `[N, C, H, W]` head outputs, unmodified.
pub fn select_map<T: Scalar>(branch_maps: &Tensor<T>, sample: usize, category: usize) -> Result<LocalizationMap<T>> {
    let (n, c, h, w) = branch_maps.dims4("select_map")?;
    if sample >= n {
        return Err(Error::InvalidArgument(format!("sample {sample} out of range for batch of {n}")));
    }
    if category >= c {
        return Err(Error::InvalidArgument(format!(
            "category {category} out of range for {c} categories"
        )));
    }
    let plane = h * w;
    let start = (sample * c + category) * plane;
    Ok(LocalizationMap {
        grid: Tensor::from_vec(vec![h, w], branch_maps.data()[start..start + plane].to_vec())?,
        category,
        normalized: false,
    })
}

/// `Σ_k S_k · W[k, c]` over features `[K, H, W]` and FC weights `[K, C]`; no bias.
pub fn cam_posthoc<T: Scalar>(features: &Tensor<T>, fc_weights: &Tensor<T>, category: usize) -> Result<LocalizationMap<T>> {
    features.expect_rank("cam_posthoc features", 3)?;
    fc_weights.expect_rank("cam_posthoc weights", 2)?;
    let (k, h, w) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    let c = fc_weights.shape()[1];
    if fc_weights.shape()[0] != k {
        return Err(Error::ShapeMismatch {
            op: "cam_posthoc",
            expected: features.shape().to_vec(),
            actual: fc_weights.shape().to_vec(),
        });
    }
    if category >= c {
        return Err(Error::InvalidArgument(format!(
            "category {category} out of range for {c} categories"
        )));
    }
    let plane = h * w;
    let mut grid = vec![T::zero(); plane];
    for (kk, fmap) in features.data().chunks_exact(plane).enumerate() {
        let wt = fc_weights.data()[kk * c + category];
        for (g, &v) in grid.iter_mut().zip(fmap) {
            *g = *g + wt * v;
        }
    }
    Ok(LocalizationMap {
        grid: Tensor::from_vec(vec![h, w], grid)?,
        category,
        normalized: false,
    })
}

/// Min-max normalization to `[0, 1]`. A constant map becomes all zeros.
pub fn normalize_grid<T: Scalar>(grid: &Tensor<T>) -> Tensor<T> {
    let (lo, hi) = grid
        .data()
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > T::zero()) {
        return grid.zeros_like();
    }
    grid.map(|v| (v - lo) / range)
}

pub fn normalize_map<T: Scalar>(map: &LocalizationMap<T>) -> LocalizationMap<T> {
    LocalizationMap {
        grid: normalize_grid(&map.grid),
        category: map.category,
        normalized: true,
    }
}

/// Elementwise maximum of two normalized maps of the same category.
pub fn fuse_maps<T: Scalar>(a: &LocalizationMap<T>, b: &LocalizationMap<T>) -> Result<LocalizationMap<T>> {
    if !a.normalized || !b.normalized {
        return Err(Error::InvalidArgument("fuse_maps expects normalized maps".into()));
    }
    if a.grid.shape() != b.grid.shape() {
        return Err(Error::shape("fuse_maps", a.grid.shape(), b.grid.shape()));
    }
    if a.category != b.category {
        return Err(Error::InvalidArgument(format!(
            "cannot fuse maps of categories {} and {}",
            a.category, b.category
        )));
    }
    let data = a
        .grid
        .data()
        .iter()
        .zip(b.grid.data())
        .map(|(&x, &y)| x.max(y))
        .collect();
    Ok(LocalizationMap {
        grid: Tensor::from_vec(a.grid.shape().to_vec(), data)?,
        category: a.category,
        normalized: true,
    })
}

/// Row-major `(row, col)` of the first maximum.
pub fn argmax_location<T: Scalar>(map: &LocalizationMap<T>) -> (usize, usize) {
    let w = map.grid.shape()[1];
    let mut best = 0;
    for (i, &v) in map.grid.data().iter().enumerate() {
        if v > map.grid.data()[best] {
            best = i;
        }
    }
    (best / w, best % w)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub trials: usize,
    pub max_logit_diff: f64,
    pub max_map_diff: f64,
}

/// Worst-case `(|y_fc − y_conv|, |A_fc − A_conv|)` for one feature tensor
/// `[K, H, W]` and one weight matrix `[K, C]` shared by both heads.
pub fn compare_heads<T: Scalar>(features: &Tensor<T>, weights: &Tensor<T>) -> Result<(f64, f64)> {
    features.expect_rank("compare_heads", 3)?;
    let (k, h, w) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    let c = weights.shape()[1];

    // GAP then fully connected.
    let batch = features.clone().reshape(&[1, k, h, w])?;
    let pooled = gap(&batch)?;
    let fc_logits: Vec<T> = (0..c)
        .map(|cc| {
            (0..k).fold(T::zero(), |acc, kk| acc + pooled.data()[kk] * weights.data()[kk * c + cc])
        })
        .collect();

    // 1×1 conv sharing the same matrix, then GAP.
    let conv_w = Tensor::from_fn(&[c, k, 1, 1], |i| weights.data()[(i % k) * c + i / k]);
    let head = Conv2d::new(conv_w, Tensor::zeros(&[c]), 1, 0)?;
    let maps = conv2d_forward(&batch, &head)?;
    let conv_logits = gap(&maps)?;

    let mut logit_diff = 0.0f64;
    let mut map_diff = 0.0f64;
    for cc in 0..c {
        logit_diff = logit_diff.max((fc_logits[cc].to_f64() - conv_logits.data()[cc].to_f64()).abs());
        let a_fc = cam_posthoc(features, weights, cc)?;
        let a_conv = select_map(&maps, 0, cc)?;
        map_diff = map_diff.max(a_fc.grid.max_abs_diff(&a_conv.grid)?);
    }
    Ok((logit_diff, map_diff))
}

/// Builds both head formulations from one random weight matrix over one
/// random feature tensor per trial and reports the worst disagreement.
pub fn equivalence_report<T: Scalar>(
    seed: u64,
    trials: usize,
    channels: usize,
    categories: usize,
    size: usize,
) -> Result<EquivalenceReport> {
    if trials == 0 {
        return Err(Error::InvalidArgument("equivalence_report needs at least one trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = EquivalenceReport {
        trials,
        max_logit_diff: 0.0,
        max_map_diff: 0.0,
    };
    for _ in 0..trials {
        // Post-ReLU style features, nonnegative.
        let features = Tensor::<T>::from_fn(&[channels, size, size], |_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            T::from_f64(v.max(0.0))
        });
        let weights = Tensor::<T>::from_fn(&[channels, categories], |_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            T::from_f64(v / (channels as f64).sqrt())
        });
        let (dl, dm) = compare_heads(&features, &weights)?;
        report.max_logit_diff = report.max_logit_diff.max(dl);
        report.max_map_diff = report.max_map_diff.max(dm);
    }
    Ok(report)
}
