//! Training checkpoints: parameters and optimizer velocities in the tensor
//! file format, plus a JSON sidecar with the configuration, epoch counter,
//! RNG position and early-stop bookkeeping.

use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{NetConfig, NetworkParams};
use crate::tensorfile;
use crate::trainer::{EpochLog, TrainConfig};

pub const SIDECAR_VERSION: u32 = 1;
const PARAM_PREFIX: &str = "param.";
const VELOCITY_PREFIX: &str = "velocity.";

/// Position of the shuffle stream. `word_pos` is kept as a decimal string
/// because it is a 128-bit counter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad RNG word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    pub best_val_loss: Option<f64>,
    pub best_epoch: usize,
    pub bad_epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub format_version: u32,
    /// Number of completed epochs.
    pub epoch: usize,
    pub config: TrainConfig,
    pub rng: RngState,
    pub early_stop: EarlyStop,
    pub stopped_early: bool,
    pub log: Vec<EpochLog>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: NetworkParams<f32>,
    pub velocity: NetworkParams<f32>,
    pub sidecar: Sidecar,
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("ckpt_ep{epoch:03}.acol"))
}

pub fn sidecar_path(tensor_path: &Path) -> PathBuf {
    tensor_path.with_extension("json")
}

pub fn parse_sidecar(bytes: &[u8]) -> Result<Sidecar> {
    let s: Sidecar = serde_json::from_slice(bytes)?;
    if s.format_version != SIDECAR_VERSION {
        return Err(Error::InvalidArgument(format!(
            "unsupported sidecar version {} (expected {SIDECAR_VERSION})",
            s.format_version
        )));
    }
    s.config.validate()?;
    s.rng.restore()?;
    Ok(s)
}

impl Checkpoint {
    /// Writes `ckpt_epNNN.acol` and its `.json` sidecar into `dir`, returning
    /// the tensor file path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = checkpoint_path(dir, self.sidecar.epoch);
        let mut named = Vec::new();
        for (prefix, p) in [(PARAM_PREFIX, &self.params), (VELOCITY_PREFIX, &self.velocity)] {
            for (name, t) in p.named_tensors() {
                named.push((format!("{prefix}{name}"), t));
            }
        }
        tensorfile::write_file(&path, &named)?;
        let side = sidecar_path(&path);
        let json = serde_json::to_string_pretty(&self.sidecar)? + "\n";
        std::fs::write(&side, json).map_err(|e| Error::io(&side, e))?;
        Ok(path)
    }

    /// Loads a checkpoint, taking the network shape from its own sidecar.
    pub fn load(path: &Path) -> Result<Self> {
        let sidecar = Self::read_sidecar(path)?;
        let net = sidecar.config.net.clone();
        Self::load_with(path, sidecar, &net)
    }

    /// Loads a checkpoint that must match `net`; tensors of another shape
    /// are rejected with a shape diagnostic.
    pub fn load_expecting(path: &Path, net: &NetConfig) -> Result<Self> {
        let sidecar = Self::read_sidecar(path)?;
        Self::load_with(path, sidecar, net)
    }

    fn read_sidecar(path: &Path) -> Result<Sidecar> {
        let side = sidecar_path(path);
        let bytes = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
        parse_sidecar(&bytes).map_err(|e| Error::corrupt(&side, e.to_string()))
    }

    fn load_with(path: &Path, sidecar: Sidecar, net: &NetConfig) -> Result<Self> {
        let named = tensorfile::read_file(path)?;
        let params = NetworkParams::from_named(net, &named, PARAM_PREFIX);
        let velocity = NetworkParams::from_named(net, &named, VELOCITY_PREFIX);
        let (params, velocity) = match (params, velocity) {
            (Ok(p), Ok(v)) => (p, v),
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        let expected = named.len();
        let used = params.named_tensors().len() + velocity.named_tensors().len();
        if used != expected {
            return Err(Error::corrupt(path, format!("{expected} tensors, expected {used}")));
        }
        Ok(Self { params, velocity, sidecar })
    }
}
