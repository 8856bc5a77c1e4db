//! Flat run configuration shared by every subcommand.
//!
//! Values are resolved as defaults, then a JSON file, then command-line
//! flags. Keys are snake_case in JSON and kebab-case on the command line.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::localization::Connectivity;
use crate::net::{BranchInit, NetConfig, PredictionMode};
use crate::synthdata::SynthConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,

    pub image_size: usize,
    pub num_categories: usize,
    pub num_train: usize,
    pub num_test: usize,
    pub noise: f64,
    pub glyph_size: usize,
    pub common_size: usize,
    pub scale_jitter: usize,
    pub tint_strength: f64,
    pub tint_reliability: f64,

    pub backbone_widths: Vec<usize>,
    pub branch_width: usize,
    pub branch_convs: usize,
    pub input_shift: f64,

    pub delta: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub tau_rel: f64,
    pub connectivity: Connectivity,
    pub top_k: usize,
    pub k_box: usize,
    pub prediction_mode: PredictionMode,
    pub erase: bool,
    pub val_every: usize,
    pub patience: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        let t = TrainConfig::default();
        Self {
            seed: t.seed,
            image_size: s.image_size,
            num_categories: s.num_categories,
            num_train: s.num_train,
            num_test: s.num_test,
            noise: s.noise,
            glyph_size: s.glyph_size,
            common_size: s.common_size,
            scale_jitter: s.scale_jitter,
            tint_strength: s.tint_strength,
            tint_reliability: s.tint_reliability,
            backbone_widths: t.net.backbone_widths.clone(),
            branch_width: t.net.branch_width,
            branch_convs: t.net.branch_convs,
            input_shift: t.net.input_shift,
            delta: t.delta,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            batch_size: t.batch_size,
            tau_rel: t.tau_rel,
            connectivity: t.connectivity,
            top_k: t.top_k,
            k_box: t.k_box,
            prediction_mode: t.prediction_mode,
            erase: t.erase,
            val_every: t.val_every,
            patience: t.patience,
        }
    }
}

/// Keys that change only how a trained model is scored, and so may differ
/// from the values a checkpoint was trained with.
pub const EVAL_KEYS: &[&str] = &["tau_rel", "connectivity", "top_k", "k_box", "prediction_mode", "batch_size"];

/// A resolved configuration plus the keys that were set explicitly.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: RunConfig,
    pub explicit: Map<String, Value>,
}

/// Parses a flat JSON config object. Unknown keys are rejected.
pub fn parse_config(bytes: &[u8]) -> Result<Map<String, Value>> {
    let value: Value = serde_json::from_slice(bytes)?;
    let Value::Object(map) = value else {
        return Err(Error::InvalidArgument("config file must hold a JSON object".into()));
    };
    if let Some((k, v)) = map.iter().find(|(_, v)| v.is_object()) {
        return Err(Error::InvalidArgument(format!("config key {k:?} is nested ({v}); the format is flat")));
    }
    // Type-check against the full schema now, so errors name the file.
    merge(&Map::new(), &map)?;
    Ok(map)
}

fn merge(file: &Map<String, Value>, flags: &Map<String, Value>) -> Result<Resolved> {
    let mut explicit = file.clone();
    explicit.extend(flags.iter().map(|(k, v)| (k.clone(), v.clone())));
    let Value::Object(mut base) = serde_json::to_value(RunConfig::default())? else {
        unreachable!("RunConfig serializes to an object");
    };
    base.extend(explicit.iter().map(|(k, v)| (k.clone(), v.clone())));
    let config: RunConfig = serde_json::from_value(Value::Object(base))?;
    Ok(Resolved { config, explicit })
}

/// Defaults, then the optional file, then flag overrides (already as JSON values).
pub fn resolve(file: Option<&Path>, flags: &Map<String, Value>) -> Result<Resolved> {
    let from_file = match file {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            parse_config(&bytes).map_err(|e| Error::corrupt(p, e.to_string()))?
        }
        None => Map::new(),
    };
    merge(&from_file, flags)
}

impl RunConfig {
    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            image_size: self.image_size,
            num_categories: self.num_categories,
            num_train: self.num_train,
            num_test: self.num_test,
            noise: self.noise,
            glyph_size: self.glyph_size,
            common_size: self.common_size,
            scale_jitter: self.scale_jitter,
            tint_strength: self.tint_strength,
            tint_reliability: self.tint_reliability,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            delta: self.delta,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            tau_rel: self.tau_rel,
            connectivity: self.connectivity,
            top_k: self.top_k,
            k_box: self.k_box,
            prediction_mode: self.prediction_mode,
            erase: self.erase,
            branch_init: BranchInit::Independent,
            val_every: self.val_every,
            patience: self.patience,
            net: NetConfig {
                in_channels: 3,
                backbone_widths: self.backbone_widths.clone(),
                branch_width: self.branch_width,
                branch_convs: self.branch_convs,
                num_categories: self.num_categories,
                input_shift: self.input_shift,
            },
        }
    }

    /// Applies the explicitly set evaluation keys on top of a checkpoint's
    /// training configuration.
    pub fn eval_overrides(resolved: &Resolved, base: &TrainConfig) -> TrainConfig {
        let c = &resolved.config;
        let set = |k: &str| resolved.explicit.contains_key(k);
        let mut out = base.clone();
        if set("tau_rel") {
            out.tau_rel = c.tau_rel;
        }
        if set("connectivity") {
            out.connectivity = c.connectivity;
        }
        if set("top_k") {
            out.top_k = c.top_k;
        }
        if set("k_box") {
            out.k_box = c.k_box;
        }
        if set("prediction_mode") {
            out.prediction_mode = c.prediction_mode;
        }
        if set("batch_size") {
            out.batch_size = c.batch_size;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn obj(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn defaults_round_trip_and_split() {
        let c = RunConfig::default();
        assert_eq!(c.synth(), SynthConfig::default());
        assert_eq!(c.train(), TrainConfig::default());
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
    }

    #[test]
    fn flags_beat_file_beats_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"lr": 0.5, "epochs": 3, "connectivity": "4"}"#).unwrap();
        let r = resolve(Some(&path), &obj(json!({"lr": 0.25}))).unwrap();
        assert_eq!(r.config.lr, 0.25);
        assert_eq!(r.config.epochs, 3);
        assert_eq!(r.config.connectivity, Connectivity::Four);
        assert_eq!(r.config.batch_size, 32);
        assert_eq!(r.explicit.len(), 3);
    }

    #[test]
    fn unknown_nested_and_mistyped_keys_fail_naming_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        for text in [r#"{"learning_rate": 1}"#, r#"{"net": {"x": 1}}"#, r#"{"epochs": "many"}"#, "[1]", "{"] {
            std::fs::write(&path, text).unwrap();
            let err = resolve(Some(&path), &Map::new()).unwrap_err().to_string();
            assert!(err.contains("bad.json"), "{text}: {err}");
        }
        assert!(resolve(Some(&dir.path().join("missing.json")), &Map::new()).is_err());
    }

    #[test]
    fn eval_overrides_touch_only_explicit_scoring_keys() {
        let base = TrainConfig { delta: 0.8, tau_rel: 0.3, ..TrainConfig::default() };
        let r = merge(&Map::new(), &obj(json!({"tau_rel": 0.1, "top_k": 2}))).unwrap();
        let out = RunConfig::eval_overrides(&r, &base);
        assert_eq!(out.tau_rel, 0.1);
        assert_eq!(out.top_k, 2);
        assert_eq!(out.delta, 0.8);
        assert_eq!(out.k_box, base.k_box);
    }
}
