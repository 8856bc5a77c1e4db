//! The dual-classifier network: a shared convolutional backbone, classifier
//! A on the backbone features, and classifier B on the same features with
//! A's most discriminative region zeroed out.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::BoolGrid;
use crate::locmaps::normalize_grid;
use crate::ops::{
    bilinear_resize, conv2d_backward, conv2d_backward_params, conv2d_forward, gap, gap_backward, maxpool2,
    maxpool2_backward, relu, relu_backward, softmax_cross_entropy, Conv2d, PoolIndices,
};
use crate::tensor::{Scalar, Tensor};
use crate::tensorfile::AnyTensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub in_channels: usize,
    /// Output channels of each conv3×3 → relu → maxpool2 backbone block.
    pub backbone_widths: Vec<usize>,
    pub branch_width: usize,
    /// Number of conv3×3 + relu layers before each branch's 1×1 map layer.
    pub branch_convs: usize,
    pub num_categories: usize,
    /// Subtracted from every input pixel before the first convolution.
    pub input_shift: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            backbone_widths: vec![16, 32, 64],
            branch_width: 64,
            branch_convs: 2,
            num_categories: 4,
            input_shift: 0.5,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.backbone_widths.is_empty()
            || self.backbone_widths.contains(&0)
            || self.branch_width == 0
            || self.num_categories == 0
            || !self.input_shift.is_finite()
        {
            return Err(Error::InvalidArgument(format!("degenerate network config {self:?}")));
        }
        Ok(())
    }

    /// Channel count K of the backbone features.
    pub fn feature_channels(&self) -> usize {
        *self.backbone_widths.last().expect("validated")
    }

    /// Total spatial downsampling of the backbone.
    pub fn downsample(&self) -> usize {
        1 << self.backbone_widths.len()
    }

    fn backbone_shapes(&self) -> Vec<[usize; 4]> {
        let mut inp = self.in_channels;
        self.backbone_widths
            .iter()
            .map(|&out| {
                let s = [out, inp, 3, 3];
                inp = out;
                s
            })
            .collect()
    }

    fn branch_shapes(&self) -> Vec<[usize; 4]> {
        let mut inp = self.feature_channels();
        let mut shapes: Vec<_> = (0..self.branch_convs)
            .map(|_| {
                let s = [self.branch_width, inp, 3, 3];
                inp = self.branch_width;
                s
            })
            .collect();
        shapes.push([self.num_categories, inp, 1, 1]);
        shapes
    }
}

/// Which branches start from the same random draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BranchInit {
    #[default]
    Independent,
    Identical,
}

/// Learnable parameters: backbone, classifier A and classifier B. Gradients
/// and optimizer velocities reuse this type.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T> {
    pub config: NetConfig,
    pub backbone: Vec<Conv2d<T>>,
    pub classifier_a: Vec<Conv2d<T>>,
    pub classifier_b: Vec<Conv2d<T>>,
}

fn layer_from_shape<T: Scalar>(s: [usize; 4]) -> Conv2d<T> {
    let pad = if s[2] == 3 { 1 } else { 0 };
    Conv2d::zeros(s[0], s[1], s[2], 1, pad).expect("valid layer shape")
}

fn he_layer<T: Scalar>(s: [usize; 4], rng: &mut ChaCha8Rng) -> Conv2d<T> {
    let mut layer = layer_from_shape::<T>(s);
    let std = (2.0 / (s[1] * s[2] * s[3]) as f64).sqrt();
    for w in layer.weight.data_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *w = T::from_f64(z * std);
    }
    layer
}

impl<T: Scalar> NetworkParams<T> {
    pub fn zeros(config: &NetConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            backbone: config.backbone_shapes().into_iter().map(layer_from_shape).collect(),
            classifier_a: config.branch_shapes().into_iter().map(layer_from_shape).collect(),
            classifier_b: config.branch_shapes().into_iter().map(layer_from_shape).collect(),
        })
    }

    /// He fan-in normal weights, zero biases, from a seeded stream.
    pub fn init(config: &NetConfig, seed: u64, branches: BranchInit) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = config.backbone_shapes().into_iter().map(|s| he_layer(s, &mut rng)).collect();
        let classifier_a: Vec<Conv2d<T>> =
            config.branch_shapes().into_iter().map(|s| he_layer(s, &mut rng)).collect();
        let classifier_b = match branches {
            BranchInit::Identical => classifier_a.clone(),
            BranchInit::Independent => config.branch_shapes().into_iter().map(|s| he_layer(s, &mut rng)).collect(),
        };
        Ok(Self {
            config: config.clone(),
            backbone,
            classifier_a,
            classifier_b,
        })
    }

    pub fn num_categories(&self) -> usize {
        self.config.num_categories
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config).expect("config already validated")
    }

    /// Parameter tensors under their stable names, e.g. `backbone.0.weight`
    /// or `clsA.2.bias`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (prefix, layers) in [("backbone", &self.backbone), ("clsA", &self.classifier_a), ("clsB", &self.classifier_b)] {
            for (i, l) in layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &l.weight));
                out.push((format!("{prefix}.{i}.bias"), &l.bias));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (prefix, layers) in [
            ("backbone", &mut self.backbone),
            ("clsA", &mut self.classifier_a),
            ("clsB", &mut self.classifier_b),
        ] {
            for (i, l) in layers.iter_mut().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &mut l.weight));
                out.push((format!("{prefix}.{i}.bias"), &mut l.bias));
            }
        }
        out
    }

    /// Rebuilds parameters from named tensors (any precision), checking
    /// every name and shape against `config`. Names with a prefix (for
    /// example optimizer state) are selected by `prefix`.
    pub fn from_named(config: &NetConfig, named: &[(String, AnyTensor)], prefix: &str) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut lookup: HashMap<&str, &AnyTensor> = named
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s, t)))
            .collect();
        for (name, slot) in params.named_tensors_mut() {
            let src = lookup
                .remove(name.as_str())
                .ok_or_else(|| Error::InvalidArgument(format!("missing tensor {prefix}{name}")))?;
            if src.shape() != slot.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load parameters",
                    expected: slot.shape().to_vec(),
                    actual: src.shape().to_vec(),
                });
            }
            *slot = src.to();
        }
        if let Some(extra) = lookup.keys().next() {
            return Err(Error::InvalidArgument(format!("unexpected tensor {prefix}{extra}")));
        }
        Ok(params)
    }

    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        let conv = |l: &Conv2d<T>| Conv2d {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
            stride: l.stride,
            pad: l.pad,
        };
        NetworkParams {
            config: self.config.clone(),
            backbone: self.backbone.iter().map(conv).collect(),
            classifier_a: self.classifier_a.iter().map(conv).collect(),
            classifier_b: self.classifier_b.iter().map(conv).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }
}

/// Spatial erase mask over the backbone feature grid (true = zero out).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EraseMask(pub BoolGrid);

impl EraseMask {
    pub fn empty(size: usize) -> Self {
        EraseMask(BoolGrid::new(size, size))
    }

    pub fn grid(&self) -> &BoolGrid {
        &self.0
    }
}

/// Cells of an already normalized `[H, H]` map strictly above `delta`.
pub fn threshold_mask<T: Scalar>(normalized: &Tensor<T>, delta: f64) -> Result<EraseMask> {
    normalized.expect_rank("threshold_mask", 2)?;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("erase threshold must lie in (0, 1), got {delta}")));
    }
    let (h, w) = (normalized.shape()[0], normalized.shape()[1]);
    let thr = T::from_f64(delta);
    Ok(EraseMask(BoolGrid::from_fn(h, w, |r, c| normalized.data()[r * w + c] > thr)))
}

/// Normalizes branch A's map to `[0, 1]`, resizes it to `target × target`
/// when needed and marks cells strictly above `delta`. A constant map yields
/// an empty mask.
pub fn make_erase_mask<T: Scalar>(map_a: &Tensor<T>, delta: f64, target: usize) -> Result<EraseMask> {
    map_a.expect_rank("make_erase_mask", 2)?;
    let mut norm = normalize_grid(map_a);
    if norm.shape() != [target, target] {
        norm = bilinear_resize(&norm, target, target)?;
    }
    threshold_mask(&norm, delta)
}

/// Zeroes every channel of `features[n]` at the cells set in `masks[n]`.
pub fn erase_features<T: Scalar>(features: &Tensor<T>, masks: &[EraseMask]) -> Result<Tensor<T>> {
    let (n, k, h, w) = features.dims4("erase_features")?;
    if masks.len() != n {
        return Err(Error::InvalidArgument(format!("{} masks for a batch of {n}", masks.len())));
    }
    let mut out = features.clone();
    for (i, m) in masks.iter().enumerate() {
        let g = m.grid();
        if g.height != h || g.width != w {
            return Err(Error::shape("erase_features mask", &[h, w], &[g.height, g.width]));
        }
        let sample = out.outer_mut(i);
        for plane in sample.chunks_exact_mut(h * w).take(k) {
            for (v, &erase) in plane.iter_mut().zip(&g.cells) {
                if erase {
                    *v = T::zero();
                }
            }
        }
    }
    Ok(out)
}

struct BlockTrace<T> {
    input: Tensor<T>,
    pre_act: Tensor<T>,
    pool: PoolIndices,
}

struct BranchTrace<T> {
    /// Input to each layer; the last entry feeds the 1×1 map layer.
    inputs: Vec<Tensor<T>>,
    pre_acts: Vec<Tensor<T>>,
}

fn backbone_traced<T: Scalar>(images: &Tensor<T>, params: &NetworkParams<T>) -> Result<(Tensor<T>, Vec<BlockTrace<T>>)> {
    let (_, _, h, w) = images.dims4("backbone_forward")?;
    let f = params.config.downsample();
    if h % f != 0 || w % f != 0 {
        return Err(Error::InvalidArgument(format!(
            "image size {h}x{w} is not divisible by the backbone downsampling factor {f}"
        )));
    }
    let shift = T::from_f64(params.config.input_shift);
    let mut x = images.map(|v| v - shift);
    let mut trace = Vec::with_capacity(params.backbone.len());
    for layer in &params.backbone {
        let z = conv2d_forward(&x, layer)?;
        let a = relu(&z);
        let (pooled, pool) = maxpool2(&a)?;
        trace.push(BlockTrace {
            input: x,
            pre_act: z,
            pool,
        });
        x = pooled;
    }
    Ok((x, trace))
}

/// Feature maps S `[N, K, H/2^b, W/2^b]` of the backbone.
pub fn backbone_forward<T: Scalar>(images: &Tensor<T>, params: &NetworkParams<T>) -> Result<Tensor<T>> {
    backbone_traced(images, params).map(|(s, _)| s)
}

fn branch_traced<T: Scalar>(features: &Tensor<T>, branch: &[Conv2d<T>]) -> Result<(Tensor<T>, Tensor<T>, BranchTrace<T>)> {
    let (last, convs) = branch
        .split_last()
        .ok_or_else(|| Error::InvalidArgument("empty classifier branch".into()))?;
    let mut x = features.clone();
    let mut inputs = Vec::with_capacity(branch.len());
    let mut pre_acts = Vec::with_capacity(convs.len());
    for layer in convs {
        let z = conv2d_forward(&x, layer)?;
        let a = relu(&z);
        inputs.push(x);
        pre_acts.push(z);
        x = a;
    }
    let maps = conv2d_forward(&x, last)?;
    inputs.push(x);
    let logits = gap(&maps)?;
    Ok((maps, logits, BranchTrace { inputs, pre_acts }))
}

/// One classifier branch: class maps `[N, C, H₂, H₂]` from the final 1×1
/// conv and logits as their spatial means.
pub fn classifier_forward<T: Scalar>(features: &Tensor<T>, branch: &[Conv2d<T>]) -> Result<(Tensor<T>, Tensor<T>)> {
    branch_traced(features, branch).map(|(m, l, _)| (m, l))
}

fn branch_backward<T: Scalar>(
    trace: &BranchTrace<T>,
    grad_maps: &Tensor<T>,
    branch: &[Conv2d<T>],
    grads: &mut [Conv2d<T>],
) -> Result<Tensor<T>> {
    let last = branch.len() - 1;
    let g = conv2d_backward(&trace.inputs[last], &branch[last], grad_maps)?;
    grads[last].weight = g.weight;
    grads[last].bias = g.bias;
    let mut grad = g.input.expect("input gradient requested");
    for i in (0..last).rev() {
        let gz = relu_backward(&trace.pre_acts[i], &grad)?;
        let g = conv2d_backward(&trace.inputs[i], &branch[i], &gz)?;
        grads[i].weight = g.weight;
        grads[i].bias = g.bias;
        grad = g.input.expect("input gradient requested");
    }
    Ok(grad)
}

fn backbone_backward<T: Scalar>(
    trace: &[BlockTrace<T>],
    grad_features: Tensor<T>,
    params: &NetworkParams<T>,
    grads: &mut [Conv2d<T>],
) -> Result<()> {
    let mut grad = grad_features;
    for i in (0..trace.len()).rev() {
        let ga = maxpool2_backward(&grad, &trace[i].pool)?;
        let gz = relu_backward(&trace[i].pre_act, &ga)?;
        let g = if i == 0 {
            conv2d_backward_params(&trace[i].input, &params.backbone[i], &gz)?
        } else {
            conv2d_backward(&trace[i].input, &params.backbone[i], &gz)?
        };
        grads[i].weight = g.weight;
        grads[i].bias = g.bias;
        if let Some(gx) = g.input {
            grad = gx;
        }
    }
    Ok(())
}

/// Where the erase masks of a forward pass came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskOrigin {
    /// Branch A's map at the ground-truth label.
    Labels,
    /// Branch A's map at its own top-scoring category.
    Prediction,
    /// Supplied by the caller and held fixed.
    Fixed,
    /// Erasing switched off.
    Disabled,
}

#[derive(Clone, Copy, Debug)]
pub enum Mode<'a> {
    Train { labels: &'a [usize] },
    Test,
}

/// How the final category ranking combines the two branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    BranchA,
    BranchB,
    #[default]
    Mean,
}

impl std::str::FromStr for PredictionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "branch_a" | "a" => Ok(Self::BranchA),
            "branch_b" | "b" => Ok(Self::BranchB),
            "mean" => Ok(Self::Mean),
            _ => Err(Error::InvalidArgument(format!("unknown prediction mode {s:?}"))),
        }
    }
}

/// Everything one forward pass produced, plus the activations needed to
/// back-propagate through it.
pub struct ForwardRecord<T> {
    pub features: Tensor<T>,
    pub erased: Tensor<T>,
    pub maps_a: Tensor<T>,
    pub maps_b: Tensor<T>,
    pub logits_a: Tensor<T>,
    pub logits_b: Tensor<T>,
    pub masks: Vec<EraseMask>,
    /// Category whose branch-A map produced each mask.
    pub mask_categories: Vec<usize>,
    pub origin: MaskOrigin,
    backbone_trace: Vec<BlockTrace<T>>,
    trace_a: BranchTrace<T>,
    trace_b: BranchTrace<T>,
}

fn argmax_row<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl<T: Scalar> ForwardRecord<T> {
    pub fn batch_size(&self) -> usize {
        self.logits_a.shape()[0]
    }

    /// Per-sample category scores under `mode`, `[N, C]`.
    pub fn scores(&self, mode: PredictionMode) -> Tensor<T> {
        match mode {
            PredictionMode::BranchA => self.logits_a.clone(),
            PredictionMode::BranchB => self.logits_b.clone(),
            PredictionMode::Mean => {
                let half = T::from_f64(0.5);
                let data = self
                    .logits_a
                    .data()
                    .iter()
                    .zip(self.logits_b.data())
                    .map(|(&a, &b)| (a + b) * half)
                    .collect();
                Tensor::from_vec(self.logits_a.shape().to_vec(), data).expect("same shape")
            }
        }
    }

    /// Categories of sample `n` by descending score; ties keep the lower index first.
    pub fn ranking(&self, n: usize, mode: PredictionMode) -> Vec<usize> {
        let scores = self.scores(mode);
        let row = scores.outer(n);
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        order
    }

    pub fn predictions(&self, mode: PredictionMode) -> Vec<usize> {
        let scores = self.scores(mode);
        (0..self.batch_size()).map(|n| argmax_row(scores.outer(n))).collect()
    }

    /// Hash of every piecewise-linear decision made in the pass (ReLU signs,
    /// pooling winners, erase masks). Equal signatures mean the loss is the
    /// same smooth function locally.
    pub fn activation_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for b in &self.backbone_trace {
            b.pool.argmax.hash(&mut h);
            for v in b.pre_act.data() {
                (*v > T::zero()).hash(&mut h);
            }
        }
        for t in [&self.trace_a, &self.trace_b] {
            for z in &t.pre_acts {
                for v in z.data() {
                    (*v > T::zero()).hash(&mut h);
                }
            }
        }
        for m in &self.masks {
            m.grid().cells.hash(&mut h);
        }
        h.finish()
    }
}

fn forward_impl<T: Scalar>(
    images: &Tensor<T>,
    params: &NetworkParams<T>,
    masks: MaskPlan<'_>,
) -> Result<ForwardRecord<T>> {
    let (features, backbone_trace) = backbone_traced(images, params)?;
    let (maps_a, logits_a, trace_a) = branch_traced(&features, &params.classifier_a)?;
    let (n, _, h1, w1) = features.dims4("features")?;
    if h1 != w1 {
        return Err(Error::InvalidArgument(format!("feature grid must be square, got {h1}x{w1}")));
    }
    let c = params.num_categories();

    let (masks, mask_categories, origin) = match masks {
        MaskPlan::Fixed(m) => (m, vec![usize::MAX; n], MaskOrigin::Fixed),
        MaskPlan::Disabled => ((0..n).map(|_| EraseMask::empty(h1)).collect(), vec![usize::MAX; n], MaskOrigin::Disabled),
        MaskPlan::Labels(labels, delta) | MaskPlan::Prediction(labels, delta) => {
            let cats: Vec<usize> = match labels {
                Some(l) => l.to_vec(),
                None => (0..n).map(|i| argmax_row(logits_a.outer(i))).collect(),
            };
            let masks = cats
                .iter()
                .enumerate()
                .map(|(i, &cat)| {
                    let plane = maps_a.shape()[2] * maps_a.shape()[3];
                    let start = (i * c + cat) * plane;
                    let map = Tensor::from_vec(
                        maps_a.shape()[2..].to_vec(),
                        maps_a.data()[start..start + plane].to_vec(),
                    )?;
                    make_erase_mask(&map, delta, h1)
                })
                .collect::<Result<Vec<_>>>()?;
            let origin = if labels.is_some() { MaskOrigin::Labels } else { MaskOrigin::Prediction };
            (masks, cats, origin)
        }
    };

    let erased = erase_features(&features, &masks)?;
    let (maps_b, logits_b, trace_b) = branch_traced(&erased, &params.classifier_b)?;
    Ok(ForwardRecord {
        features,
        erased,
        maps_a,
        maps_b,
        logits_a,
        logits_b,
        masks,
        mask_categories,
        origin,
        backbone_trace,
        trace_a,
        trace_b,
    })
}

enum MaskPlan<'a> {
    Labels(Option<&'a [usize]>, f64),
    Prediction(Option<&'a [usize]>, f64),
    Fixed(Vec<EraseMask>),
    Disabled,
}

/// Runs backbone, classifier A, the erase step and classifier B. Training
/// erases by the ground-truth category's map; testing by branch A's top
/// category.
pub fn acol_forward<T: Scalar>(
    images: &Tensor<T>,
    params: &NetworkParams<T>,
    delta: f64,
    mode: Mode<'_>,
) -> Result<ForwardRecord<T>> {
    let n = images.dims4("acol_forward")?.0;
    let plan = match mode {
        Mode::Train { labels } => {
            check_labels(labels, n, params.num_categories())?;
            MaskPlan::Labels(Some(labels), delta)
        }
        Mode::Test => MaskPlan::Prediction(None, delta),
    };
    forward_impl(images, params, plan)
}

/// Forward pass with caller-supplied erase masks held constant.
pub fn acol_forward_with_masks<T: Scalar>(
    images: &Tensor<T>,
    params: &NetworkParams<T>,
    masks: Vec<EraseMask>,
) -> Result<ForwardRecord<T>> {
    forward_impl(images, params, MaskPlan::Fixed(masks))
}

/// Forward pass with erasing switched off (branch B sees the raw features).
pub fn acol_forward_unerased<T: Scalar>(images: &Tensor<T>, params: &NetworkParams<T>) -> Result<ForwardRecord<T>> {
    forward_impl(images, params, MaskPlan::Disabled)
}

fn check_labels(labels: &[usize], n: usize, c: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {c} categories")));
    }
    Ok(())
}

pub struct AcolGradients<T> {
    pub loss: T,
    pub loss_a: T,
    pub loss_b: T,
    pub params: NetworkParams<T>,
    /// Gradient reaching S from branch A's loss.
    pub features_from_a: Tensor<T>,
    /// Gradient reaching S from branch B's loss (zero at erased cells).
    pub features_from_b: Tensor<T>,
}

/// `CE(logits_a) + CE(logits_b)` and its gradients. The erase masks are
/// constants: no gradient flows through the thresholding.
pub fn acol_loss_and_grads<T: Scalar>(
    record: &ForwardRecord<T>,
    labels: &[usize],
    params: &NetworkParams<T>,
) -> Result<AcolGradients<T>> {
    if record.origin == MaskOrigin::Prediction {
        return Err(Error::InvalidArgument(
            "loss gradients need a training-mode forward record".into(),
        ));
    }
    check_labels(labels, record.batch_size(), params.num_categories())?;
    let (loss_a, g_logits_a) = softmax_cross_entropy(&record.logits_a, labels)?;
    let (loss_b, g_logits_b) = softmax_cross_entropy(&record.logits_b, labels)?;
    let mut grads = params.zeros_like();

    let g_maps_a = gap_backward(&g_logits_a, record.maps_a.shape())?;
    let features_from_a = branch_backward(&record.trace_a, &g_maps_a, &params.classifier_a, &mut grads.classifier_a)?;

    let g_maps_b = gap_backward(&g_logits_b, record.maps_b.shape())?;
    let g_erased = branch_backward(&record.trace_b, &g_maps_b, &params.classifier_b, &mut grads.classifier_b)?;
    let features_from_b = erase_features(&g_erased, &record.masks)?;

    let mut g_features = features_from_a.clone();
    g_features.add_assign(&features_from_b)?;
    backbone_backward(&record.backbone_trace, g_features, params, &mut grads.backbone)?;

    Ok(AcolGradients {
        loss: loss_a + loss_b,
        loss_a,
        loss_b,
        params: grads,
        features_from_a,
        features_from_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetConfig {
        NetConfig {
            in_channels: 3,
            backbone_widths: vec![4, 5],
            branch_width: 6,
            branch_convs: 2,
            num_categories: 3,
            input_shift: 0.5,
        }
    }

    fn images(n: usize, size: usize) -> Tensor<f64> {
        Tensor::from_fn(&[n, 3, size, size], |i| ((i as f64) * 0.618).fract())
    }

    #[test]
    fn default_backbone_shape() {
        let cfg = NetConfig::default();
        let p = NetworkParams::<f32>::init(&cfg, 1, BranchInit::Independent).unwrap();
        let x = Tensor::<f32>::from_fn(&[2, 3, 64, 64], |_| 0.5);
        let s = backbone_forward(&x, &p).unwrap();
        assert_eq!(s.shape(), &[2, 64, 8, 8]);
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_image_rejected() {
        let p = NetworkParams::<f64>::init(&tiny(), 1, BranchInit::Independent).unwrap();
        assert!(backbone_forward(&Tensor::zeros(&[1, 3, 10, 10]), &p).is_err());
    }

    #[test]
    fn parameter_names_are_stable() {
        let p = NetworkParams::<f32>::zeros(&NetConfig::default()).unwrap();
        let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "backbone.0.weight");
        assert!(names.contains(&"clsA.2.bias".to_string()));
        assert!(names.contains(&"clsB.2.weight".to_string()));
        assert_eq!(names.len(), 2 * (3 + 3 + 3));
    }

    #[test]
    fn from_named_checks_shapes() {
        let p = NetworkParams::<f32>::init(&tiny(), 3, BranchInit::Independent).unwrap();
        let named: Vec<(String, AnyTensor)> = p
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, AnyTensor::Single(t.clone())))
            .collect();
        assert_eq!(NetworkParams::<f32>::from_named(&tiny(), &named, "").unwrap(), p);
        let wider = NetConfig { num_categories: 5, ..tiny() };
        let err = NetworkParams::<f32>::from_named(&wider, &named, "").unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }), "{err}");
    }

    #[test]
    fn erase_mask_threshold_is_strict() {
        let bar = Tensor::<f64>::from_vec(vec![2, 2], vec![0.7, 0.3, 0.61, 0.59]).unwrap();
        assert_eq!(threshold_mask(&bar, 0.6).unwrap().grid().cells, vec![true, false, true, false]);
        let at = Tensor::<f64>::from_vec(vec![1, 2], vec![0.6, 0.6000001]).unwrap();
        assert_eq!(threshold_mask(&at, 0.6).unwrap().grid().cells, vec![false, true]);

        let raw = Tensor::<f64>::from_vec(vec![2, 2], vec![5.0, 1.0, 4.9, 4.99]).unwrap();
        let top = make_erase_mask(&raw, 0.999, 2).unwrap();
        assert_eq!(top.grid().cells, vec![true, false, false, false]);
        let flat = Tensor::<f64>::full(&[3, 3], 2.0);
        assert!(make_erase_mask(&flat, 0.5, 3).unwrap().grid().is_empty());
        assert!(make_erase_mask(&raw, 1.0, 2).is_err());
        assert!(make_erase_mask(&raw, 0.0, 2).is_err());
    }

    #[test]
    fn erase_mask_resizes_to_feature_grid() {
        let m = Tensor::<f64>::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let mask = make_erase_mask(&m, 0.5, 4).unwrap();
        assert_eq!(mask.grid().height, 4);
        assert!(mask.grid().get(0, 0));
        assert!(!mask.grid().get(3, 3));
    }

    #[test]
    fn erase_features_semantics() {
        let s = Tensor::<f64>::from_fn(&[1, 64, 2, 2], |i| i as f64 + 1.0);
        let none = EraseMask::empty(2);
        assert_eq!(erase_features(&s, &[none]).unwrap(), s);
        let all = EraseMask(BoolGrid::from_fn(2, 2, |_, _| true));
        assert!(erase_features(&s, &[all]).unwrap().data().iter().all(|&v| v == 0.0));
        let one = EraseMask(BoolGrid::from_fn(2, 2, |r, c| r == 1 && c == 0));
        let e = erase_features(&s, &[one]).unwrap();
        for k in 0..64 {
            assert_eq!(e.get(&[0, k, 1, 0]), 0.0);
            assert_eq!(e.get(&[0, k, 0, 1]), s.get(&[0, k, 0, 1]));
        }
        assert!(erase_features(&s, &[EraseMask::empty(3)]).is_err());
    }

    #[test]
    fn one_hot_map_layer_copies_penultimate_channel() {
        let cfg = tiny();
        let mut p = NetworkParams::<f64>::init(&cfg, 5, BranchInit::Independent).unwrap();
        let last = p.classifier_a.last_mut().unwrap();
        last.weight = Tensor::zeros(last.weight.shape());
        last.weight.set(&[2, 4, 0, 0], 1.0);
        let s = Tensor::<f64>::from_fn(&[1, 5, 4, 4], |i| ((i as f64) * 0.37).sin());
        let (maps, logits) = classifier_forward(&s, &p.classifier_a).unwrap();
        let (_, _, trace) = branch_traced(&s, &p.classifier_a).unwrap();
        let penultimate = trace.inputs.last().unwrap();
        for i in 0..16 {
            assert_eq!(maps.data()[2 * 16 + i], penultimate.data()[4 * 16 + i]);
        }
        assert_eq!(logits, gap(&maps).unwrap());
    }

    #[test]
    fn train_mode_requires_valid_labels() {
        let p = NetworkParams::<f64>::init(&tiny(), 1, BranchInit::Independent).unwrap();
        let x = images(2, 8);
        assert!(acol_forward(&x, &p, 0.6, Mode::Train { labels: &[0] }).is_err());
        assert!(acol_forward(&x, &p, 0.6, Mode::Train { labels: &[0, 3] }).is_err());
        let rec = acol_forward(&x, &p, 0.6, Mode::Test).unwrap();
        assert!(acol_loss_and_grads(&rec, &[0, 1], &p).is_err());
    }

    #[test]
    fn identical_branches_without_erasing_agree() {
        let p = NetworkParams::<f64>::init(&tiny(), 9, BranchInit::Identical).unwrap();
        let x = images(3, 8);
        let rec = acol_forward_unerased(&x, &p).unwrap();
        assert_eq!(rec.logits_a, rec.logits_b);
        let g = acol_loss_and_grads(&rec, &[0, 1, 2], &p).unwrap();
        for (a, b) in g.params.classifier_a.iter().zip(&g.params.classifier_b) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn uniform_logits_loss_is_two_ln_c() {
        let cfg = NetConfig { num_categories: 4, ..tiny() };
        let p = NetworkParams::<f64>::zeros(&cfg).unwrap();
        let x = images(2, 8);
        let rec = acol_forward(&x, &p, 0.6, Mode::Train { labels: &[1, 3] }).unwrap();
        let g = acol_loss_and_grads(&rec, &[1, 3], &p).unwrap();
        assert!((g.loss - 2.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn branch_b_gradient_vanishes_on_erased_cells() {
        let p = NetworkParams::<f64>::init(&tiny(), 2, BranchInit::Independent).unwrap();
        let x = images(2, 8);
        let labels = [0, 2];
        let rec = acol_forward(&x, &p, 0.5, Mode::Train { labels: &labels }).unwrap();
        assert!(rec.masks.iter().any(|m| !m.grid().is_empty()));
        let g = acol_loss_and_grads(&rec, &labels, &p).unwrap();
        let (n, k, h, w) = g.features_from_b.dims4("t").unwrap();
        for i in 0..n {
            for r in 0..h {
                for c in 0..w {
                    if rec.masks[i].grid().get(r, c) {
                        for kk in 0..k {
                            assert_eq!(g.features_from_b.get(&[i, kk, r, c]), 0.0);
                            assert_eq!(rec.erased.get(&[i, kk, r, c]), 0.0);
                        }
                    }
                }
            }
        }
    }
}
