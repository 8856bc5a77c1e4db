//! The training loop, the evaluation driver and the erase-threshold sweep.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, EarlyStop, RngState, Sidecar, SIDECAR_VERSION};
use crate::error::{Error, Result};
use crate::localization::{box_from_map, evaluate, iou, BBox, IOU_THRESHOLD, Connectivity, GroundTruth, Guess, LocMetrics, SamplePrediction};
use crate::locmaps::{fuse_maps, normalize_map, select_map, LocalizationMap};
use crate::net::{
    acol_forward, acol_forward_unerased, acol_loss_and_grads, AcolGradients, BranchInit, ForwardRecord, Mode,
    NetConfig, NetworkParams, PredictionMode,
};
use crate::ops::{bilinear_resize, sgd_update, SgdConfig};
use crate::synthdata::{batch_images, Sample};
use crate::tensor::Tensor;

/// Stream id of the shuffle generator; stream 0 of the same seed draws the
/// initial weights.
const SHUFFLE_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Erase threshold on branch A's normalized map, shared by training and testing.
    pub delta: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Foreground threshold relative to the map maximum.
    pub tau_rel: f64,
    pub connectivity: Connectivity,
    pub top_k: usize,
    /// Only the first `k_box` guesses receive a box.
    pub k_box: usize,
    pub prediction_mode: PredictionMode,
    pub erase: bool,
    pub branch_init: BranchInit,
    /// Every `val_every`-th group of `C` consecutive training samples is held
    /// out for early stopping; 0 trains on everything.
    pub val_every: usize,
    /// Stop after this many epochs without a lower validation loss; 0 never stops early.
    pub patience: usize,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            delta: 0.6,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 30,
            batch_size: 32,
            seed: 7,
            tau_rel: 0.2,
            connectivity: Connectivity::Eight,
            top_k: 5,
            k_box: 5,
            prediction_mode: PredictionMode::Mean,
            erase: true,
            branch_init: BranchInit::Independent,
            val_every: 10,
            patience: 5,
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Checks ranges and returns warnings for values that are allowed but
    /// outside the usual 0.5 to 0.9 erase-threshold range.
    pub fn validate(&self) -> Result<Vec<String>> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(0.5..=0.99).contains(&self.delta) {
            return bad(format!("delta {} outside [0.5, 0.99]", self.delta));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be a finite non-negative number", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("momentum must lie in [0, 1) and weight_decay must be non-negative".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.tau_rel > 0.0 && self.tau_rel < 1.0) {
            return bad(format!("tau_rel {} outside (0, 1)", self.tau_rel));
        }
        if self.top_k == 0 || self.k_box == 0 {
            return bad("top_k and k_box must be positive".into());
        }
        self.net.validate()?;
        let mut warnings = Vec::new();
        if self.delta > 0.9 {
            warnings.push(format!("delta {} is above the usual 0.5 to 0.9 range", self.delta));
        }
        Ok(warnings)
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// Top-k and box counts capped at the number of categories.
    pub fn effective_k(&self) -> (usize, usize) {
        let c = self.net.num_categories;
        let k = self.top_k.min(c);
        (k, self.k_box.min(k))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_a: f64,
    pub loss_b: f64,
    pub acc_a: f64,
    pub acc_b: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
}

/// What the step observer sees after each gradient computation and before
/// the parameter update.
pub struct StepInfo<'a> {
    pub epoch: usize,
    pub step: usize,
    pub labels: &'a [usize],
    /// Parameters the forward pass ran with.
    pub params: &'a NetworkParams<f32>,
    pub record: &'a ForwardRecord<f32>,
    pub grads: &'a AcolGradients<f32>,
    pub config: &'a TrainConfig,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: NetworkParams<f32>,
    pub log: Vec<EpochLog>,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub last_checkpoint: Option<PathBuf>,
}

/// Indices of the training and validation subsets of `n` samples.
pub fn split_indices(n: usize, categories: usize, val_every: usize) -> (Vec<usize>, Vec<usize>) {
    if val_every < 2 {
        return ((0..n).collect(), Vec::new());
    }
    (0..n).partition(|&i| (i / categories) % val_every != val_every - 1)
}

struct TrainState {
    params: NetworkParams<f32>,
    velocity: NetworkParams<f32>,
    rng: ChaCha8Rng,
    epoch: usize,
    early: EarlyStop,
    stopped_early: bool,
    log: Vec<EpochLog>,
}

fn labels_of(samples: &[&Sample]) -> Vec<usize> {
    samples.iter().map(|s| s.label).collect()
}

fn forward_train(images: &Tensor<f32>, labels: &[usize], params: &NetworkParams<f32>, cfg: &TrainConfig) -> Result<ForwardRecord<f32>> {
    if cfg.erase {
        acol_forward(images, params, cfg.delta, Mode::Train { labels })
    } else {
        acol_forward_unerased(images, params)
    }
}

fn check_dataset(data: &[Sample], cfg: &TrainConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if let Some(s) = data.iter().find(|s| s.label >= cfg.net.num_categories) {
        return Err(Error::InvalidArgument(format!(
            "label {} exceeds the network's {} categories",
            s.label, cfg.net.num_categories
        )));
    }
    if data[0].image.shape()[0] != cfg.net.in_channels {
        return Err(Error::shape("training images", &[cfg.net.in_channels], &data[0].image.shape()[..1]));
    }
    Ok(())
}

fn write_log(dir: &Path, log: &[EpochLog]) -> Result<()> {
    let path = dir.join("train_log.jsonl");
    let mut buf = Vec::new();
    for entry in log {
        serde_json::to_writer(&mut buf, entry)?;
        buf.push(b'\n');
    }
    std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))
}

fn mean_loss(params: &NetworkParams<f32>, samples: &[&Sample], cfg: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(cfg.batch_size) {
        let labels = labels_of(chunk);
        let record = forward_train(&batch_images(chunk)?, &labels, params, cfg)?;
        let g = acol_loss_and_grads(&record, &labels, params)?;
        total += g.loss as f64 * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Trains from scratch. With `out_dir`, writes a checkpoint per epoch and a
/// JSON-lines log.
pub fn train(data: &[Sample], cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    train_observed(data, cfg, out_dir, None, &mut |_| Ok(()))
}

/// Continues from a checkpoint; the result is bitwise identical to an
/// uninterrupted run with the checkpoint's configuration.
pub fn resume(data: &[Sample], checkpoint: Checkpoint, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let cfg = checkpoint.sidecar.config.clone();
    train_observed(data, &cfg, out_dir, Some(checkpoint), &mut |_| Ok(()))
}

/// Full training loop with a per-step observer, used by the erasing audits.
pub fn train_observed(
    data: &[Sample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    from: Option<Checkpoint>,
    observer: &mut dyn FnMut(&StepInfo<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(data, cfg)?;
    let (train_idx, val_idx) = split_indices(data.len(), cfg.net.num_categories, cfg.val_every);
    if train_idx.is_empty() {
        return Err(Error::InvalidArgument("validation split leaves no training samples".into()));
    }
    let val: Vec<&Sample> = val_idx.iter().map(|&i| &data[i]).collect();

    let mut st = match from {
        Some(ck) => {
            if ck.sidecar.config != *cfg {
                return Err(Error::InvalidArgument("checkpoint was written under a different config".into()));
            }
            TrainState {
                rng: ck.sidecar.rng.restore()?,
                params: ck.params,
                velocity: ck.velocity,
                epoch: ck.sidecar.epoch,
                early: ck.sidecar.early_stop,
                stopped_early: ck.sidecar.stopped_early,
                log: ck.sidecar.log,
            }
        }
        None => {
            let params = NetworkParams::init(&cfg.net, cfg.seed, cfg.branch_init)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(SHUFFLE_STREAM);
            TrainState {
                velocity: params.zeros_like(),
                params,
                rng,
                epoch: 0,
                early: EarlyStop { best_val_loss: None, best_epoch: 0, bad_epochs: 0 },
                stopped_early: false,
                log: Vec::new(),
            }
        }
    };
    let sgd = cfg.sgd();
    let mut last_checkpoint = out_dir.map(|d| crate::checkpoint::checkpoint_path(d, st.epoch)).filter(|p| p.exists());

    while st.epoch < cfg.epochs && !st.stopped_early {
        let epoch = st.epoch + 1;
        let mut order = train_idx.clone();
        order.shuffle(&mut st.rng);
        let (mut sum_a, mut sum_b, mut hit_a, mut hit_b) = (0.0f64, 0.0f64, 0usize, 0usize);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let labels = labels_of(&batch);
            let record = forward_train(&batch_images(&batch)?, &labels, &st.params, cfg)?;
            let grads = acol_loss_and_grads(&record, &labels, &st.params)?;
            if !grads.loss.is_finite() {
                return Err(Error::Diverged { epoch, step, last_checkpoint });
            }
            observer(&StepInfo { epoch, step, labels: &labels, params: &st.params, record: &record, grads: &grads, config: cfg })?;
            let n = batch.len() as f64;
            sum_a += grads.loss_a as f64 * n;
            sum_b += grads.loss_b as f64 * n;
            hit_a += record.predictions(PredictionMode::BranchA).iter().zip(&labels).filter(|(p, l)| p == l).count();
            hit_b += record.predictions(PredictionMode::BranchB).iter().zip(&labels).filter(|(p, l)| p == l).count();

            let g = grads.params.named_tensors();
            for ((_, p), ((_, v), (_, gr))) in st
                .params
                .named_tensors_mut()
                .into_iter()
                .zip(st.velocity.named_tensors_mut().into_iter().zip(g))
            {
                sgd_update(p, gr, v, &sgd)?;
            }
            if !st.params.all_finite() {
                return Err(Error::Diverged { epoch, step, last_checkpoint });
            }
        }
        let n = order.len() as f64;
        let val_loss = if val.is_empty() { None } else { Some(mean_loss(&st.params, &val, cfg)?) };
        st.log.push(EpochLog {
            epoch,
            loss_a: sum_a / n,
            loss_b: sum_b / n,
            acc_a: hit_a as f64 / n,
            acc_b: hit_b as f64 / n,
            val_loss,
        });
        if let Some(v) = val_loss {
            if !v.is_finite() {
                return Err(Error::Diverged { epoch, step: order.len().div_ceil(cfg.batch_size), last_checkpoint });
            }
            if st.early.best_val_loss.is_none_or(|b| v < b) {
                st.early = EarlyStop { best_val_loss: Some(v), best_epoch: epoch, bad_epochs: 0 };
            } else {
                st.early.bad_epochs += 1;
                if cfg.patience > 0 && st.early.bad_epochs >= cfg.patience {
                    st.stopped_early = true;
                }
            }
        }
        st.epoch = epoch;
        if let Some(dir) = out_dir {
            let ck = Checkpoint {
                params: st.params.clone(),
                velocity: st.velocity.clone(),
                sidecar: Sidecar {
                    format_version: SIDECAR_VERSION,
                    epoch,
                    config: cfg.clone(),
                    rng: RngState::capture(cfg.seed, &st.rng),
                    early_stop: st.early,
                    stopped_early: st.stopped_early,
                    log: st.log.clone(),
                },
            };
            last_checkpoint = Some(ck.save(dir)?);
            write_log(dir, &st.log)?;
        }
    }
    Ok(TrainOutcome {
        params: st.params,
        log: st.log,
        epochs_run: st.epoch,
        stopped_early: st.stopped_early,
        last_checkpoint,
    })
}

/// Maps of one sample at one category, normalized and resized to the image.
#[derive(Clone, Debug)]
pub struct SampleMaps {
    pub a: LocalizationMap<f32>,
    pub b: LocalizationMap<f32>,
    pub fused: LocalizationMap<f32>,
}

fn to_image_size(map: LocalizationMap<f32>, h: usize, w: usize) -> Result<LocalizationMap<f32>> {
    Ok(LocalizationMap {
        grid: bilinear_resize(&map.grid, h, w)?,
        ..map
    })
}

pub fn sample_maps(record: &ForwardRecord<f32>, n: usize, category: usize, image_hw: (usize, usize)) -> Result<SampleMaps> {
    let a = normalize_map(&select_map(&record.maps_a, n, category)?);
    let b = normalize_map(&select_map(&record.maps_b, n, category)?);
    let fused = fuse_maps(&a, &b)?;
    let (h, w) = image_hw;
    Ok(SampleMaps {
        a: to_image_size(a, h, w)?,
        b: to_image_size(b, h, w)?,
        fused: to_image_size(fused, h, w)?,
    })
}

/// Per-sample evaluation artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub index: usize,
    pub label: usize,
    pub gt_box: BBox,
    pub ranking: Vec<usize>,
    /// Fused-map box for the top-ranked category.
    pub top1_box: Option<BBox>,
    pub top1_iou: f64,
    /// Fused-map box for the true category.
    pub gt_known_box: Option<BBox>,
    pub gt_known_iou: f64,
    /// Branch-A-only box for the true category.
    pub baseline_gt_known_box: Option<BBox>,
    pub baseline_gt_known_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fused: LocMetrics,
    pub baseline_a: LocMetrics,
    pub samples: Vec<SampleReport>,
}

fn box_iou(b: Option<BBox>, gt: &BBox) -> f64 {
    b.map_or(0.0, |b| iou(&b, gt))
}

/// Runs the test-mode network over `samples` and scores fused-map boxes
/// alongside the branch-A-only baseline under the same box extraction.
pub fn evaluate_model(params: &NetworkParams<f32>, samples: &[Sample], cfg: &TrainConfig) -> Result<EvalReport> {
    if params.num_categories() != cfg.net.num_categories {
        return Err(Error::shape(
            "evaluate_model categories",
            &[cfg.net.num_categories],
            &[params.num_categories()],
        ));
    }
    let (k, k_box) = cfg.effective_k();
    let mut fused_preds = Vec::with_capacity(samples.len());
    let mut base_preds = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    let mut reports = Vec::with_capacity(samples.len());
    let extract = |m: &LocalizationMap<f32>, hw: (usize, usize)| box_from_map(m, cfg.tau_rel, cfg.connectivity, hw);

    for (chunk_no, chunk) in samples.chunks(cfg.batch_size).enumerate() {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let images = batch_images(&refs)?;
        let hw = (images.shape()[2], images.shape()[3]);
        let record = acol_forward(&images, params, cfg.delta, Mode::Test)?;
        for (n, s) in chunk.iter().enumerate() {
            if s.label >= params.num_categories() {
                return Err(Error::InvalidArgument(format!("label {} out of range", s.label)));
            }
            let ranking: Vec<usize> = record.ranking(n, cfg.prediction_mode).into_iter().take(k).collect();
            let mut fused_guesses = Vec::with_capacity(k);
            let mut base_guesses = Vec::with_capacity(k);
            for (r, &c) in ranking.iter().enumerate() {
                let (fb, bb) = if r < k_box {
                    let maps = sample_maps(&record, n, c, hw)?;
                    (extract(&maps.fused, hw)?, extract(&maps.a, hw)?)
                } else {
                    (None, None)
                };
                fused_guesses.push(Guess { category: c, bbox: fb });
                base_guesses.push(Guess { category: c, bbox: bb });
            }
            let gt_maps = sample_maps(&record, n, s.label, hw)?;
            let gt_known_box = extract(&gt_maps.fused, hw)?;
            let baseline_box = extract(&gt_maps.a, hw)?;
            let top1_box = fused_guesses[0].bbox;
            reports.push(SampleReport {
                index: chunk_no * cfg.batch_size + n,
                label: s.label,
                gt_box: s.gt_box,
                ranking: ranking.clone(),
                top1_box,
                top1_iou: box_iou(top1_box, &s.gt_box),
                gt_known_box,
                gt_known_iou: box_iou(gt_known_box, &s.gt_box),
                baseline_gt_known_box: baseline_box,
                baseline_gt_known_iou: box_iou(baseline_box, &s.gt_box),
            });
            fused_preds.push(SamplePrediction { guesses: fused_guesses, gt_known_box });
            base_preds.push(SamplePrediction { guesses: base_guesses, gt_known_box: baseline_box });
            gts.push(GroundTruth { label: s.label, bbox: s.gt_box });
        }
    }
    Ok(EvalReport {
        fused: evaluate(&fused_preds, &gts, k, k_box)?,
        baseline_a: evaluate(&base_preds, &gts, k, k_box)?,
        samples: reports,
    })
}

/// Foreground thresholds tried by [`calibrate_tau`].
pub const TAU_GRID: [f64; 15] = [0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauRow {
    pub tau_rel: f64,
    pub fused_gt_known_loc_err: f64,
    pub baseline_gt_known_loc_err: f64,
}

/// GT-known error of the fused map and of branch A alone at each threshold.
pub fn gt_known_tau_curve(params: &NetworkParams<f32>, samples: &[Sample], cfg: &TrainConfig, taus: &[f64]) -> Result<Vec<TauRow>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples to calibrate on".into()));
    }
    let mut hits = vec![(0usize, 0usize); taus.len()];
    for chunk in samples.chunks(cfg.batch_size) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let images = batch_images(&refs)?;
        let hw = (images.shape()[2], images.shape()[3]);
        let record = acol_forward(&images, params, cfg.delta, Mode::Test)?;
        for (n, s) in chunk.iter().enumerate() {
            let maps = sample_maps(&record, n, s.label, hw)?;
            for (h, &tau) in hits.iter_mut().zip(taus) {
                let good = |m: &LocalizationMap<f32>| -> Result<bool> {
                    Ok(box_from_map(m, tau, cfg.connectivity, hw)?.is_some_and(|b| iou(&b, &s.gt_box) > IOU_THRESHOLD))
                };
                h.0 += good(&maps.fused)? as usize;
                h.1 += good(&maps.a)? as usize;
            }
        }
    }
    let n = samples.len() as f64;
    Ok(taus
        .iter()
        .zip(hits)
        .map(|(&tau_rel, (f, b))| TauRow {
            tau_rel,
            fused_gt_known_loc_err: 1.0 - f as f64 / n,
            baseline_gt_known_loc_err: 1.0 - b as f64 / n,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauCalibration {
    pub fused_tau: f64,
    pub baseline_tau: f64,
    pub rows: Vec<TauRow>,
}

/// Picks, separately for the fused map and for branch A alone, the
/// threshold with the lowest GT-known error on `samples` (ties go to the
/// smaller threshold).
pub fn calibrate_tau(params: &NetworkParams<f32>, samples: &[Sample], cfg: &TrainConfig, taus: &[f64]) -> Result<TauCalibration> {
    let rows = gt_known_tau_curve(params, samples, cfg, taus)?;
    let best = |key: fn(&TauRow) -> f64| {
        rows.iter()
            .fold(None::<&TauRow>, |acc, r| match acc {
                Some(a) if key(a) <= key(r) => Some(a),
                _ => Some(r),
            })
            .map(|r| r.tau_rel)
            .expect("non-empty grid")
    };
    Ok(TauCalibration {
        fused_tau: best(|r| r.fused_gt_known_loc_err),
        baseline_tau: best(|r| r.baseline_gt_known_loc_err),
        rows,
    })
}

/// The validation samples held out of `train` under `cfg.val_every`.
pub fn validation_samples(train: &[Sample], cfg: &TrainConfig) -> Vec<Sample> {
    split_indices(train.len(), cfg.net.num_categories, cfg.val_every)
        .1
        .into_iter()
        .map(|i| train[i].clone())
        .collect()
}

/// Writes one JSON object per sample.
pub fn write_sample_reports(path: &Path, samples: &[SampleReport]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top1_loc_err: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top5_loc_err: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gt_known_loc_err: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cls_err: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Trains and evaluates one model per threshold from the same seed. A
/// failing cell is recorded in its row and the sweep moves on.
pub fn delta_sweep(
    train_set: &[Sample],
    test_set: &[Sample],
    cfg: &TrainConfig,
    deltas: &[f64],
    out_dir: Option<&Path>,
) -> Vec<SweepRow> {
    deltas
        .iter()
        .map(|&delta| {
            let cell = TrainConfig { delta, ..cfg.clone() };
            let dir = out_dir.map(|d| d.join(format!("delta_{delta:.2}")));
            let run = || -> Result<LocMetrics> {
                let outcome = train(train_set, &cell, dir.as_deref())?;
                Ok(evaluate_model(&outcome.params, test_set, &cell)?.fused)
            };
            match run() {
                Ok(m) => SweepRow {
                    delta,
                    top1_loc_err: Some(m.top1_loc_err),
                    top5_loc_err: Some(m.topk_loc_err),
                    gt_known_loc_err: Some(m.gt_known_loc_err),
                    cls_err: Some(m.cls_err),
                    error: None,
                },
                Err(e) => SweepRow {
                    delta,
                    top1_loc_err: None,
                    top5_loc_err: None,
                    gt_known_loc_err: None,
                    cls_err: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, SynthConfig};

    fn tiny_net() -> NetConfig {
        NetConfig {
            backbone_widths: vec![4, 8],
            branch_width: 8,
            branch_convs: 1,
            ..NetConfig::default()
        }
    }

    fn tiny_data(n: usize) -> Vec<Sample> {
        let cfg = SynthConfig {
            image_size: 32,
            num_train: n,
            num_test: 4,
            glyph_size: 10,
            common_size: 10,
            scale_jitter: 1,
            ..SynthConfig::default()
        };
        generate(&cfg, 1).unwrap().train
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            val_every: 0,
            net: tiny_net(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn delta_range_is_enforced() {
        assert!(TrainConfig { delta: 0.4, ..tiny_cfg() }.validate().is_err());
        assert!(TrainConfig { delta: 1.0, ..tiny_cfg() }.validate().is_err());
        assert_eq!(TrainConfig { delta: 0.95, ..tiny_cfg() }.validate().unwrap().len(), 1);
        assert!(TrainConfig { delta: 0.5, ..tiny_cfg() }.validate().unwrap().is_empty());
    }

    #[test]
    fn split_holds_out_whole_category_groups() {
        let (tr, va) = split_indices(80, 4, 10);
        assert_eq!((tr.len(), va.len()), (72, 8));
        assert_eq!(va, vec![36, 37, 38, 39, 76, 77, 78, 79]);
        assert_eq!(split_indices(5, 4, 0).1.len(), 0);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let data = tiny_data(8);
        let cfg = TrainConfig { lr: 0.0, ..tiny_cfg() };
        let out = train(&data, &cfg, None).unwrap();
        let init = NetworkParams::<f32>::init(&cfg.net, cfg.seed, cfg.branch_init).unwrap();
        assert_eq!(out.params, init);
        assert_eq!(out.log.len(), 2);
    }

    #[test]
    fn initial_loss_is_near_two_ln_c() {
        let data = tiny_data(16);
        let cfg = tiny_cfg();
        let params = NetworkParams::<f32>::init(&cfg.net, cfg.seed, cfg.branch_init).unwrap();
        let refs: Vec<&Sample> = data.iter().collect();
        let loss = mean_loss(&params, &refs, &cfg).unwrap();
        let expect = 2.0 * (4f64).ln();
        assert!((loss - expect).abs() < 0.1 * expect, "{loss} vs {expect}");
    }

    #[test]
    fn memorizes_a_single_sample() {
        let data = tiny_data(4)[..1].to_vec();
        let cfg = TrainConfig { epochs: 60, batch_size: 1, delta: 0.99, ..tiny_cfg() };
        let out = train(&data, &cfg, None).unwrap();
        let last = out.log.last().unwrap();
        assert!(last.loss_a < 0.05, "{last:?}");
    }

    #[test]
    fn runs_are_reproducible_and_resumable() {
        let data = tiny_data(12);
        let cfg = TrainConfig { epochs: 3, val_every: 3, patience: 0, ..tiny_cfg() };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = train(&data, &cfg, Some(d1.path())).unwrap();
        let b = train(&data, &cfg, Some(d2.path())).unwrap();
        for name in ["ckpt_ep003.acol", "ckpt_ep003.json", "train_log.jsonl"] {
            assert_eq!(
                std::fs::read(d1.path().join(name)).unwrap(),
                std::fs::read(d2.path().join(name)).unwrap(),
                "{name}"
            );
        }
        assert_eq!(a.params, b.params);

        let d3 = tempfile::tempdir().unwrap();
        let ck = Checkpoint::load(&d1.path().join("ckpt_ep001.acol")).unwrap();
        let c = resume(&data, ck, Some(d3.path())).unwrap();
        assert_eq!(c.params, a.params);
        assert_eq!(c.log, a.log);
        assert_eq!(
            std::fs::read(d1.path().join("ckpt_ep003.acol")).unwrap(),
            std::fs::read(d3.path().join("ckpt_ep003.acol")).unwrap()
        );
    }

    #[test]
    fn divergence_is_reported_with_last_checkpoint() {
        let data = tiny_data(8);
        let cfg = TrainConfig { lr: 1e30, momentum: 0.0, epochs: 4, ..tiny_cfg() };
        let dir = tempfile::tempdir().unwrap();
        match train(&data, &cfg, Some(dir.path())) {
            Err(Error::Diverged { epoch, last_checkpoint, .. }) => {
                if epoch > 1 {
                    assert!(last_checkpoint.unwrap().exists());
                } else {
                    assert!(last_checkpoint.is_none());
                }
            }
            other => panic!("expected divergence, got {:?}", other.map(|o| o.log)),
        }
    }

    #[test]
    fn zeroed_branch_b_matches_baseline() {
        let data = tiny_data(8);
        let cfg = tiny_cfg();
        let mut params = NetworkParams::<f32>::init(&cfg.net, 3, cfg.branch_init).unwrap();
        for l in &mut params.classifier_b {
            l.weight.data_mut().fill(0.0);
            l.bias.data_mut().fill(0.0);
        }
        let r = evaluate_model(&params, &data, &cfg).unwrap();
        for s in &r.samples {
            assert_eq!(s.gt_known_box, s.baseline_gt_known_box);
        }
        assert_eq!(r.fused.gt_known_loc_err, r.baseline_a.gt_known_loc_err);
        assert!(r.fused.gt_known_loc_err <= r.fused.top1_loc_err);
        assert!(r.fused.topk_loc_err <= r.fused.top1_loc_err);
        assert_eq!(r.fused.k, 4);
    }

    #[test]
    fn evaluation_rejects_category_mismatch() {
        let data = tiny_data(4);
        let params = NetworkParams::<f32>::init(&tiny_net(), 3, BranchInit::Independent).unwrap();
        let cfg = TrainConfig { net: NetConfig { num_categories: 5, ..tiny_net() }, ..tiny_cfg() };
        assert!(matches!(evaluate_model(&params, &data, &cfg), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn tau_curve_matches_evaluate_at_each_threshold() {
        let data = tiny_data(8);
        let cfg = tiny_cfg();
        let params = NetworkParams::<f32>::init(&cfg.net, 5, cfg.branch_init).unwrap();
        let rows = gt_known_tau_curve(&params, &data, &cfg, &[0.2, 0.5]).unwrap();
        for row in &rows {
            let r = evaluate_model(&params, &data, &TrainConfig { tau_rel: row.tau_rel, ..cfg.clone() }).unwrap();
            assert_eq!(row.fused_gt_known_loc_err, r.fused.gt_known_loc_err);
            assert_eq!(row.baseline_gt_known_loc_err, r.baseline_a.gt_known_loc_err);
        }
        let cal = calibrate_tau(&params, &data, &cfg, &[0.2, 0.5]).unwrap();
        let min_f = rows.iter().map(|r| r.fused_gt_known_loc_err).fold(f64::INFINITY, f64::min);
        let picked = rows.iter().find(|r| r.tau_rel == cal.fused_tau).unwrap();
        assert_eq!(picked.fused_gt_known_loc_err, min_f);
    }

    #[test]
    fn sweep_records_failures_per_row() {
        let data = tiny_data(8);
        let cfg = TrainConfig { epochs: 1, ..tiny_cfg() };
        let rows = delta_sweep(&data, &data[..4], &cfg, &[0.7, 0.3], None);
        assert_eq!(rows.len(), 2);
        assert!(rows[0].error.is_none() && rows[0].top1_loc_err.is_some());
        assert!(rows[1].error.as_deref().unwrap().contains("delta"));
    }
}
