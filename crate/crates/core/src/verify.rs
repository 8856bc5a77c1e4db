//! Self-checks run by the `verify` command: finite-difference audits of
//! every layer and of the full two-branch loss, the GAP/FC versus 1×1-conv
//! head identity, and the GEMM convolution against a direct loop.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::Result;
use crate::gradcheck::{finite_difference_check, sample_probes, FdReport, relative_error, central_difference};
use crate::locmaps::equivalence_report;
use crate::net::{acol_forward, acol_forward_with_masks, acol_loss_and_grads, BranchInit, Mode, NetConfig, NetworkParams};
use crate::ops::{
    conv2d_backward, conv2d_forward, gap, gap_backward, maxpool2, maxpool2_backward, relu, relu_backward,
    softmax_cross_entropy, Conv2d,
};
use crate::tensor::Tensor;

pub const FD_TOLERANCE: f64 = 1e-4;
pub const FD_EPS: f64 = 1e-6;
pub const MIN_PROBES: usize = 32;
pub const EQUIV_TOL_DOUBLE: f64 = 1e-12;
pub const EQUIV_TOL_SINGLE: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst measured error (relative for gradients, absolute otherwise).
    pub worst_error: f64,
    pub tolerance: f64,
    pub probes: usize,
    pub seconds: f64,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| normal(rng))
}

/// `Σ out ⊙ r`, the scalar whose gradient with respect to `out` is `r`.
fn dot(a: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    a.data().iter().zip(r.data()).map(|(x, y)| x * y).sum()
}

fn with_data(shape: &[usize], x: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape.to_vec(), x.to_vec()).expect("probe keeps shape")
}

fn fd_tensor<F>(rng: &mut ChaCha8Rng, x: &Tensor<f64>, analytic: &Tensor<f64>, mut f: F) -> FdReport
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    let probes = sample_probes(rng, x.len(), MIN_PROBES);
    let shape = x.shape().to_vec();
    finite_difference_check(|v| f(&with_data(&shape, v)), x.data(), analytic.data(), &probes, FD_EPS)
}

fn finish(name: &str, start: Instant, report: FdReport, detail: String) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed: report.max_rel_error <= FD_TOLERANCE,
        worst_error: report.max_rel_error,
        tolerance: FD_TOLERANCE,
        probes: report.probes,
        seconds: start.elapsed().as_secs_f64(),
        detail,
    }
}

pub fn check_conv(seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = FdReport::default();
    for (k, stride, pad) in [(3, 1, 1), (1, 1, 0), (3, 2, 1)] {
        let input = random_tensor(&mut rng, &[2, 3, 7, 7]);
        let layer = Conv2d::new(random_tensor(&mut rng, &[4, 3, k, k]), random_tensor(&mut rng, &[4]), stride, pad)?;
        let out = conv2d_forward(&input, &layer)?;
        let r = random_tensor(&mut rng, out.shape());
        let g = conv2d_backward(&input, &layer, &r)?;
        let gi = g.input.expect("input gradient requested");
        total = total.merge(fd_tensor(&mut rng, &input, &gi, |x| dot(&conv2d_forward(x, &layer).unwrap(), &r)));
        total = total.merge(fd_tensor(&mut rng, &layer.weight, &g.weight, |w| {
            let l = Conv2d { weight: w.clone(), ..layer.clone() };
            dot(&conv2d_forward(&input, &l).unwrap(), &r)
        }));
        total = total.merge(fd_tensor(&mut rng, &layer.bias, &g.bias, |b| {
            let l = Conv2d { bias: b.clone(), ..layer.clone() };
            dot(&conv2d_forward(&input, &l).unwrap(), &r)
        }));
    }
    Ok(finish("conv", start, total, "input, weight and bias for 3x3, 1x1 and strided kernels".into()))
}

pub fn check_relu(seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Keep every input well away from the kink at zero.
    let input = Tensor::from_fn(&[2, 3, 5, 5], |_| {
        let z = normal(&mut rng);
        z.signum() * (0.05 + z.abs())
    });
    let r = random_tensor(&mut rng, input.shape());
    let analytic = relu_backward(&input, &r)?;
    let report = fd_tensor(&mut rng, &input, &analytic, |x| dot(&relu(x), &r));
    Ok(finish("relu", start, report, "inputs at least 0.05 from zero".into()))
}

pub fn check_maxpool(seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Distinct values 0.01 apart, so no window has a near tie.
    let shape = [2, 3, 6, 6];
    let mut values: Vec<f64> = (0..shape.iter().product::<usize>()).map(|i| i as f64 * 0.01).collect();
    for i in (1..values.len()).rev() {
        values.swap(i, rng.random_range(0..=i));
    }
    let input = Tensor::from_vec(shape.to_vec(), values)?;
    let (out, idx) = maxpool2(&input)?;
    let r = random_tensor(&mut rng, out.shape());
    let analytic = maxpool2_backward(&r, &idx)?;
    let report = fd_tensor(&mut rng, &input, &analytic, |x| dot(&maxpool2(x).unwrap().0, &r));
    Ok(finish("maxpool", start, report, "untied 2x2 windows".into()))
}

pub fn check_gap(seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = random_tensor(&mut rng, &[2, 4, 5, 5]);
    let r = random_tensor(&mut rng, &[2, 4]);
    let analytic = gap_backward(&r, input.shape())?;
    let report = fd_tensor(&mut rng, &input, &analytic, |x| dot(&gap(x).unwrap(), &r));
    Ok(finish("gap", start, report, String::new()))
}

pub fn check_softmax_ce(seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = Tensor::from_fn(&[8, 5], |_| 3.0 * normal(&mut rng));
    let labels: Vec<usize> = (0..8).map(|_| rng.random_range(0..5)).collect();
    let (_, analytic) = softmax_cross_entropy(&logits, &labels)?;
    let report = fd_tensor(&mut rng, &logits, &analytic, |x| softmax_cross_entropy(x, &labels).unwrap().0);
    Ok(finish("softmax-ce", start, report, String::new()))
}

/// Small network used by the full-loss audit.
pub fn audit_net() -> NetConfig {
    NetConfig {
        in_channels: 3,
        backbone_widths: vec![4, 6],
        branch_width: 6,
        branch_convs: 2,
        num_categories: 3,
        input_shift: 0.5,
    }
}

/// Finite differences of `CE_a + CE_b` with respect to every parameter
/// tensor, with the erase masks frozen at their training-mode values.
/// Probes whose ±eps evaluations cross a ReLU or pooling decision are
/// replaced by others.
pub fn check_full_net(seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = audit_net();
    let mut params = NetworkParams::<f64>::init(&cfg, seed, BranchInit::Independent)?;
    // Zero biases would leave fully erased cells exactly on a ReLU kink.
    for (name, t) in params.named_tensors_mut() {
        if name.ends_with("bias") {
            t.data_mut().iter_mut().for_each(|b| *b = 0.1 * normal(&mut rng));
        }
    }
    let images = Tensor::from_fn(&[2, 3, 16, 16], |_| rng.random::<f64>());
    let labels = vec![0, 2];
    let masks = acol_forward(&images, &params, 0.6, Mode::Train { labels: &labels })?.masks;
    let erased_cells: usize = masks.iter().map(|m| m.grid().count()).sum();
    let base = acol_forward_with_masks(&images, &params, masks.clone())?;
    let signature = base.activation_signature();
    let grads = acol_loss_and_grads(&base, &labels, &params)?;

    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut total = FdReport::default();
    let mut skipped = 0usize;
    for (ti, name) in names.iter().enumerate() {
        let len = params.named_tensors()[ti].1.len();
        let analytic = grads.params.named_tensors()[ti].1.data().to_vec();
        let x0 = params.named_tensors()[ti].1.data().to_vec();
        let eval = |x: &[f64], sig: &mut u64| -> f64 {
            let mut p = params.clone();
            p.named_tensors_mut()[ti].1.data_mut().copy_from_slice(x);
            let rec = acol_forward_with_masks(&images, &p, masks.clone()).expect("forward");
            *sig = rec.activation_signature();
            acol_loss_and_grads(&rec, &labels, &p).expect("loss").loss
        };
        let want = MIN_PROBES.min(len);
        let mut candidates = sample_probes(&mut rng, len, len);
        // Deterministic shuffle so replacements come from the whole tensor.
        for i in (1..candidates.len()).rev() {
            candidates.swap(i, rng.random_range(0..=i));
        }
        let mut report = FdReport::default();
        for &i in &candidates {
            if report.probes == want {
                break;
            }
            let (mut s_plus, mut s_minus) = (0, 0);
            let mut plus_x = x0.clone();
            plus_x[i] += FD_EPS;
            eval(&plus_x, &mut s_plus);
            let mut minus_x = x0.clone();
            minus_x[i] -= FD_EPS;
            eval(&minus_x, &mut s_minus);
            if s_plus != signature || s_minus != signature {
                skipped += 1;
                continue;
            }
            let mut sig = 0;
            let numeric = central_difference(&mut |x: &[f64]| eval(x, &mut sig), &x0, i, FD_EPS);
            let err = relative_error(numeric, analytic[i]);
            report = report.merge(FdReport { max_rel_error: err, probes: 1, worst: Some(i) });
        }
        if report.probes < want {
            return Ok(CheckResult {
                name: "full-net".into(),
                passed: false,
                worst_error: f64::INFINITY,
                tolerance: FD_TOLERANCE,
                probes: total.probes + report.probes,
                seconds: start.elapsed().as_secs_f64(),
                detail: format!("{name}: only {} smooth probes", report.probes),
            });
        }
        total = total.merge(report);
    }
    Ok(finish(
        "full-net",
        start,
        total,
        format!(
            "{} tensors, {erased_cells} erased cells frozen, {skipped} probes replaced at activation kinks",
            names.len()
        ),
    ))
}

pub fn check_equivalence_double(seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let r = equivalence_report::<f64>(seed, 100, 64, 10, 8)?;
    let worst = r.max_logit_diff.max(r.max_map_diff);
    Ok(CheckResult {
        name: "equivalence-f64".into(),
        passed: worst <= EQUIV_TOL_DOUBLE,
        worst_error: worst,
        tolerance: EQUIV_TOL_DOUBLE,
        probes: r.trials,
        seconds: start.elapsed().as_secs_f64(),
        detail: format!("max logit diff {:.3e}, max map diff {:.3e}", r.max_logit_diff, r.max_map_diff),
    })
}

pub fn check_equivalence_single(seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let r = equivalence_report::<f32>(seed, 100, 64, 10, 8)?;
    let worst = r.max_logit_diff.max(r.max_map_diff);
    Ok(CheckResult {
        name: "equivalence-f32".into(),
        passed: worst <= EQUIV_TOL_SINGLE,
        worst_error: worst,
        tolerance: EQUIV_TOL_SINGLE,
        probes: r.trials,
        seconds: start.elapsed().as_secs_f64(),
        detail: format!("max logit diff {:.3e}, max map diff {:.3e}", r.max_logit_diff, r.max_map_diff),
    })
}

/// Direct six-deep loop, accumulating bias first and then in
/// `(ci, ky, kx)` order, the same order as the GEMM kernel.
pub fn naive_conv(input: &Tensor<f64>, layer: &Conv2d<f64>) -> Tensor<f64> {
    let s = input.shape();
    let (n, ci, h, w) = (s[0], s[1], s[2], s[3]);
    let ws = layer.weight.shape();
    let (co, k) = (ws[0], ws[2]);
    let (st, pad) = (layer.stride, layer.pad);
    let oh = (h + 2 * pad - k) / st + 1;
    let ow = (w + 2 * pad - k) / st + 1;
    Tensor::from_fn(&[n, co, oh, ow], |idx| {
        let (b, o, y, x) = (idx / (co * oh * ow), idx / (oh * ow) % co, idx / ow % oh, idx % ow);
        let mut acc = layer.bias.data()[o];
        for c in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (y * st + ky) as isize - pad as isize;
                    let ix = (x * st + kx) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                        acc += layer.weight.data()[((o * ci + c) * k + ky) * k + kx]
                            * input.data()[((b * ci + c) * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
        acc
    })
}

pub fn check_conv_naive(seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0usize;
    let mut worst = 0.0f64;
    let instances = 100;
    for _ in 0..instances {
        let k = if rng.random_bool(0.5) { 3 } else { 1 };
        let pad = if k == 3 { rng.random_range(0..=1) } else { 0 };
        let stride = rng.random_range(1..=2);
        let (ci, co) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let mut h = rng.random_range(k.max(2)..=9);
        while (h + 2 * pad - k) % stride != 0 {
            h += 1;
        }
        let n = rng.random_range(1..=3);
        let input = random_tensor(&mut rng, &[n, ci, h, h]);
        let layer = Conv2d::new(random_tensor(&mut rng, &[co, ci, k, k]), random_tensor(&mut rng, &[co]), stride, pad)?;
        let fast = conv2d_forward(&input, &layer)?;
        let slow = naive_conv(&input, &layer);
        let d = fast.max_abs_diff(&slow)?;
        worst = worst.max(d);
        if fast.data().iter().zip(slow.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            mismatches += 1;
        }
    }
    Ok(CheckResult {
        name: "conv-vs-naive".into(),
        passed: mismatches == 0,
        worst_error: worst,
        tolerance: 0.0,
        probes: instances,
        seconds: start.elapsed().as_secs_f64(),
        detail: format!("{mismatches} of {instances} instances differ bitwise"),
    })
}

pub fn run_all(seed: u64) -> Result<VerifyReport> {
    let checks = vec![
        check_conv(seed)?,
        check_relu(seed)?,
        check_maxpool(seed)?,
        check_gap(seed)?,
        check_softmax_ce(seed)?,
        check_full_net(seed)?,
        check_equivalence_double(seed)?,
        check_equivalence_single(seed)?,
        check_conv_naive(seed)?,
    ];
    Ok(VerifyReport { checks })
}
