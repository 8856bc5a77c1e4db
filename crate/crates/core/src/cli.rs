//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::checkpoint::Checkpoint;
use crate::config::{self, Resolved, RunConfig};
use crate::error::{Error, Result};
use crate::heatmap;
use crate::localization::{box_from_map, iou, BBox};
use crate::net::{acol_forward, Mode, NetworkParams};
use crate::pngio;
use crate::synthdata::{self, Sample, Split};
use crate::trainer::{self, sample_maps, TrainConfig};
use crate::verify;

#[derive(Debug, Parser)]
#[command(name = "acol", version, about = "Adversarial complementary learning for weakly supervised localization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic two-part-object dataset.
    GenData(Common),
    /// Train a model on a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory holding data/manifest.json.
        #[arg(long)]
        data: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also pick a foreground threshold per map type on the validation
        /// samples held out of the training split, and score the test set with it.
        #[arg(long)]
        calibrate_tau: bool,
    },
    /// Train and evaluate one model per erase threshold.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        deltas: Vec<f64>,
    },
    /// Write map overlays and the predicted box for one image.
    Localize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory, used with --index.
        #[arg(long, requires = "index")]
        data: Option<PathBuf>,
        /// Sample index within --split.
        #[arg(long, requires = "data")]
        index: Option<usize>,
        #[arg(long, default_value = "test", value_parser = ["train", "test"])]
        split: String,
        /// A PNG file to localize instead of a dataset sample.
        #[arg(long, conflicts_with_all = ["data", "index"])]
        image: Option<PathBuf>,
        /// Also write 8-bit grayscale maps under maps/.
        #[arg(long)]
        grayscale: bool,
    },
    /// Run gradient, equivalence and convolution self-checks.
    Verify(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

/// One flag per configuration key.
#[derive(Debug, Default, Args, Serialize)]
pub struct Overrides {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_categories: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_train: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_test: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub glyph_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub common_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale_jitter: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tint_strength: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tint_reliability: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backbone_widths: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub branch_width: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub branch_convs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_shift: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_rel: Option<f64>,
    #[arg(long, value_parser = ["4", "8"])]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub connectivity: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_box: Option<usize>,
    #[arg(long, value_parser = ["branch_a", "branch_b", "mean"])]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prediction_mode: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub erase: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_every: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<Resolved> {
        let Value::Object(flags) = serde_json::to_value(&self.overrides)? else {
            unreachable!("overrides serialize to an object");
        };
        config::resolve(self.config.as_deref(), &flags)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Records the configuration a command actually ran with.
fn echo_config<T: Serialize>(out: &Path, value: &T) -> Result<()> {
    create_dir(out)?;
    write_json(&out.join("effective_config.json"), value)
}

fn warn_all(warnings: Vec<String>) {
    for w in warnings {
        eprintln!("acol: warning: {w}");
    }
}

fn load_data(root: &Path, cfg: &TrainConfig) -> Result<synthdata::SynthData> {
    let data = synthdata::load(root)?;
    let c = data.manifest.config.num_categories;
    if c != cfg.net.num_categories {
        return Err(Error::InvalidArgument(format!(
            "dataset has {c} categories but the configuration expects {}",
            cfg.net.num_categories
        )));
    }
    Ok(data)
}

fn cmd_gen_data(common: &Common) -> Result<()> {
    let r = common.resolve()?;
    let synth = r.config.synth();
    echo_config(&common.out, &r.config)?;
    let data = synthdata::generate(&synth, r.config.seed)?;
    synthdata::save(&common.out, &data)?;
    println!(
        "wrote {} train and {} test images to {}",
        data.train.len(),
        data.test.len(),
        synthdata::data_dir(&common.out).display()
    );
    Ok(())
}

fn cmd_train(common: &Common, data_root: &Path, resume: Option<&Path>) -> Result<()> {
    let r = common.resolve()?;
    let (cfg, checkpoint) = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            (ck.sidecar.config.clone(), Some(ck))
        }
        None => (r.config.train(), None),
    };
    warn_all(cfg.validate()?);
    echo_config(&common.out, &cfg)?;
    let data = load_data(data_root, &cfg)?;
    let outcome = match checkpoint {
        Some(ck) => trainer::resume(&data.train, ck, Some(&common.out))?,
        None => trainer::train(&data.train, &cfg, Some(&common.out))?,
    };
    if let Some(last) = outcome.log.last() {
        println!(
            "epoch {}: loss_a {:.4} loss_b {:.4} acc_a {:.3} acc_b {:.3}{}",
            last.epoch,
            last.loss_a,
            last.loss_b,
            last.acc_a,
            last.acc_b,
            if outcome.stopped_early { " (stopped early)" } else { "" }
        );
    }
    if let Some(p) = &outcome.last_checkpoint {
        println!("checkpoint {}", p.display());
    }
    Ok(())
}

fn cmd_eval(common: &Common, ckpt: &Path, data_root: &Path, calibrate: bool) -> Result<()> {
    let r = common.resolve()?;
    let ck = Checkpoint::load(ckpt)?;
    let cfg = RunConfig::eval_overrides(&r, &ck.sidecar.config);
    warn_all(cfg.validate()?);
    echo_config(&common.out, &cfg)?;
    let data = load_data(data_root, &cfg)?;
    let report = trainer::evaluate_model(&ck.params, &data.test, &cfg)?;
    write_json(
        &common.out.join("metrics.json"),
        &json!({ "fused": report.fused, "baseline_a": report.baseline_a }),
    )?;
    trainer::write_sample_reports(&common.out.join("samples.jsonl"), &report.samples)?;
    let m = &report.fused;
    println!(
        "top1_loc_err {:.4} top{}_loc_err {:.4} gt_known_loc_err {:.4} cls_err {:.4} (branch A alone: gt_known {:.4})",
        m.top1_loc_err, m.k, m.topk_loc_err, m.gt_known_loc_err, m.cls_err, report.baseline_a.gt_known_loc_err
    );
    if calibrate {
        let val = trainer::validation_samples(&data.train, &cfg);
        let cal = trainer::calibrate_tau(&ck.params, &val, &cfg, &trainer::TAU_GRID)?;
        let test = trainer::gt_known_tau_curve(&ck.params, &data.test, &cfg, &[cal.fused_tau, cal.baseline_tau])?;
        let (fused, baseline) = (test[0].fused_gt_known_loc_err, test[1].baseline_gt_known_loc_err);
        write_json(
            &common.out.join("calibration.json"),
            &json!({
                "validation_samples": val.len(),
                "validation": cal,
                "test": { "fused_gt_known_loc_err": fused, "baseline_gt_known_loc_err": baseline },
            }),
        )?;
        println!(
            "calibrated on {} validation samples: fused tau {} gt_known {:.4}, branch A tau {} gt_known {:.4}",
            val.len(),
            cal.fused_tau,
            fused,
            cal.baseline_tau,
            baseline
        );
    }
    Ok(())
}

fn cmd_sweep(common: &Common, data_root: &Path, deltas: &[f64]) -> Result<()> {
    let r = common.resolve()?;
    let cfg = r.config.train();
    warn_all(cfg.validate()?);
    echo_config(&common.out, &json!({ "config": cfg, "deltas": deltas }))?;
    let data = load_data(data_root, &cfg)?;
    let rows = trainer::delta_sweep(&data.train, &data.test, &cfg, deltas, Some(&common.out));
    write_json(&common.out.join("sweep.json"), &rows)?;
    println!("{:>6} {:>10} {:>10} {:>10}", "delta", "top1", "top5", "gt_known");
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.4}", v));
    let mut failed = 0;
    for row in &rows {
        println!(
            "{:>6.2} {:>10} {:>10} {:>10}",
            row.delta,
            fmt(row.top1_loc_err),
            fmt(row.top5_loc_err),
            fmt(row.gt_known_loc_err)
        );
        if let Some(e) = &row.error {
            eprintln!("acol: delta {}: {e}", row.delta);
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Error::InvalidArgument(format!("{failed} of {} sweep cells failed", rows.len())));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct LocalizeRecord {
    source: String,
    predicted_category: usize,
    ranking: Vec<usize>,
    label: Option<usize>,
    #[serde(rename = "box")]
    bbox: Option<BBox>,
    gt_box: Option<BBox>,
    iou: Option<f64>,
    files: Vec<String>,
}

fn cmd_localize(
    common: &Common,
    ckpt: &Path,
    sample: Option<(&Path, usize, Split)>,
    image: Option<&Path>,
    grayscale: bool,
) -> Result<()> {
    let r = common.resolve()?;
    let ck = Checkpoint::load(ckpt)?;
    let cfg = RunConfig::eval_overrides(&r, &ck.sidecar.config);
    warn_all(cfg.validate()?);
    echo_config(&common.out, &cfg)?;
    let (tensor, truth, stem, source) = match (sample, image) {
        (Some((root, index, split)), None) => {
            let data = load_data(root, &cfg)?;
            let set: &[Sample] = match split {
                Split::Train => &data.train,
                Split::Test => &data.test,
            };
            let s = set.get(index).ok_or_else(|| {
                Error::InvalidArgument(format!("{} split has {} samples, no index {index}", split.dir_name(), set.len()))
            })?;
            let file = format!("{}/img_{index:06}.png", split.dir_name());
            (s.image.clone(), Some((s.label, s.gt_box)), format!("{}_{index:06}", split.dir_name()), file)
        }
        (None, Some(path)) => {
            let img = pngio::read(path)?;
            let stem = path.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
            (synthdata::from_image8(&img)?, None, stem, path.display().to_string())
        }
        _ => return Err(Error::InvalidArgument("pass either --data with --index, or --image".into())),
    };
    localize_one(&ck.params, &cfg, &tensor, truth, &stem, source, &common.out, grayscale)
}

#[allow(clippy::too_many_arguments)]
fn localize_one(
    params: &NetworkParams<f32>,
    cfg: &TrainConfig,
    image: &crate::Tensor<f32>,
    truth: Option<(usize, BBox)>,
    stem: &str,
    source: String,
    out: &Path,
    grayscale: bool,
) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let batch = image.clone().reshape(&[1, 3, h, w])?;
    let record = acol_forward(&batch, params, cfg.delta, Mode::Test)?;
    let (k, _) = cfg.effective_k();
    let ranking: Vec<usize> = record.ranking(0, cfg.prediction_mode).into_iter().take(k).collect();
    let category = ranking[0];
    let maps = sample_maps(&record, 0, category, (h, w))?;
    let bbox = box_from_map(&maps.fused, cfg.tau_rel, cfg.connectivity, (h, w))?;

    let base = synthdata::to_image8(image);
    let mut fused = heatmap::overlay(&base, &maps.fused.grid)?;
    if let Some((_, gt)) = truth {
        heatmap::draw_box(&mut fused, &gt, heatmap::GROUND_TRUTH_COLOR)?;
    }
    if let Some(b) = bbox {
        heatmap::draw_box(&mut fused, &b, heatmap::PREDICTED_COLOR)?;
    }
    let outputs = [
        ("input", base.clone()),
        ("map_a", heatmap::overlay(&base, &maps.a.grid)?),
        ("map_b", heatmap::overlay(&base, &maps.b.grid)?),
        ("fused", fused),
    ];
    let mut files = Vec::new();
    for (suffix, img) in &outputs {
        let name = format!("{stem}_{suffix}.png");
        pngio::write(&out.join(&name), img)?;
        files.push(name);
    }
    if grayscale {
        let dir = out.join("maps");
        create_dir(&dir)?;
        for (suffix, m) in [("a", &maps.a), ("b", &maps.b), ("fused", &maps.fused)] {
            pngio::write(&dir.join(format!("{stem}_{suffix}.png")), &heatmap::grayscale(&m.grid)?)?;
        }
    }
    let rec = LocalizeRecord {
        source,
        predicted_category: category,
        ranking,
        label: truth.map(|t| t.0),
        bbox,
        gt_box: truth.map(|t| t.1),
        iou: match (bbox, truth) {
            (Some(b), Some((_, gt))) => Some(iou(&b, &gt)),
            (None, Some(_)) => Some(0.0),
            _ => None,
        },
        files,
    };
    write_json(&out.join(format!("{stem}.json")), &rec)?;
    println!("{stem}: category {category}, box {:?}", rec.bbox);
    Ok(())
}

fn cmd_verify(common: &Common) -> Result<bool> {
    let r = common.resolve()?;
    let report = verify::run_all(r.config.seed)?;
    for c in &report.checks {
        println!(
            "{} {:<16} worst {:.3e} (tolerance {:.0e}) probes {:>4} {:.2}s {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.worst_error,
            c.tolerance,
            c.probes,
            c.seconds,
            c.detail
        );
    }
    create_dir(&common.out)?;
    write_json(&common.out.join("verify.json"), &report)?;
    Ok(report.all_passed())
}

/// Runs a parsed command. `Ok(false)` means the command ran but reported
/// failed checks.
pub fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::GenData(c) => cmd_gen_data(c).map(|_| true),
        Command::Train { common, data, resume } => cmd_train(common, data, resume.as_deref()).map(|_| true),
        Command::Eval { common, ckpt, data, calibrate_tau } => {
            cmd_eval(common, ckpt, data, *calibrate_tau).map(|_| true)
        }
        Command::Sweep { common, data, deltas } => cmd_sweep(common, data, deltas).map(|_| true),
        Command::Localize { common, ckpt, data, index, split, image, grayscale } => {
            let split = if split == "train" { Split::Train } else { Split::Test };
            let sample = data.as_deref().zip(*index).map(|(d, i)| (d, i, split));
            cmd_localize(common, ckpt, sample, image.as_deref(), *grayscale).map(|_| true)
        }
        Command::Verify(c) => cmd_verify(c),
    }
}

/// Flat map of flag values, exposed for tests.
pub fn overrides_json(o: &Overrides) -> Result<Map<String, Value>> {
    match serde_json::to_value(o)? {
        Value::Object(m) => Ok(m),
        _ => unreachable!("overrides serialize to an object"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_map_to_config_keys() {
        let cli = Cli::try_parse_from(["acol", "gen-data", "--seed", "3", "--tau-rel", "0.3", "--connectivity", "4", "--backbone-widths", "8,16"]).unwrap();
        let Command::GenData(c) = cli.command else { panic!() };
        let m = overrides_json(&c.overrides).unwrap();
        assert_eq!(m.len(), 4);
        let r = c.resolve().unwrap();
        assert_eq!(r.config.seed, 3);
        assert_eq!(r.config.tau_rel, 0.3);
        assert_eq!(r.config.backbone_widths, vec![8, 16]);
    }

    #[test]
    fn eval_requires_a_checkpoint() {
        assert!(Cli::try_parse_from(["acol", "eval", "--data", "d"]).is_err());
        assert!(Cli::try_parse_from(["acol", "train", "--bogus", "1", "--data", "d"]).is_err());
        assert!(Cli::try_parse_from(["acol", "sweep", "--data", "d"]).is_err());
    }
}
