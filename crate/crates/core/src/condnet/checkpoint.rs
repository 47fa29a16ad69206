//! Checkpoint directories: safetensors weights plus a JSON sidecar.
//!
//! ```text
//! ckpt/weights.safetensors
//! ckpt/optimizer.safetensors   (training state, optional)
//! ckpt/ema.safetensors         (optional)
//! ckpt/checkpoint.json
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::layers::{load_tensors, ParamStore};
use super::unet::{UNet, UNetConfig};
use crate::audiofeat::MelStats;
use crate::dataset::{read_json, write_json};
use crate::error::{Error, Result};
use crate::schedule::ScheduleConfig;

pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const OPTIMIZER_FILE: &str = "optimizer.safetensors";
pub const EMA_FILE: &str = "ema.safetensors";
pub const SIDECAR_FILE: &str = "checkpoint.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: UNetConfig,
    pub schedule: ScheduleConfig,
    pub mel_stats: MelStats,
    pub step: u64,
    pub seed: u64,
    pub fingerprint: String,
    /// The run configuration text exactly as it was supplied.
    pub run_config: String,
    #[serde(default)]
    pub has_optimizer: bool,
    #[serde(default)]
    pub has_ema: bool,
}

/// Everything needed to write one checkpoint.
pub struct CheckpointContents<'a> {
    pub meta: CheckpointMeta,
    pub weights: &'a ParamStore,
    pub optimizer: Option<BTreeMap<String, Tensor>>,
    pub ema: Option<BTreeMap<String, Tensor>>,
}

fn save_map(map: &BTreeMap<String, Tensor>, path: &Path) -> Result<()> {
    let map: std::collections::HashMap<&String, Tensor> = map.iter().map(|(k, v)| (k, v.clone())).collect();
    candle_core::safetensors::save(&map, path).map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))
}

pub fn save_checkpoint(dir: &Path, contents: CheckpointContents<'_>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io("creating checkpoint directory", dir, e))?;
    let mut meta = contents.meta;
    meta.has_optimizer = contents.optimizer.is_some();
    meta.has_ema = contents.ema.is_some();
    contents.weights.save(&dir.join(WEIGHTS_FILE))?;
    if let Some(opt) = &contents.optimizer {
        save_map(opt, &dir.join(OPTIMIZER_FILE))?;
    }
    if let Some(ema) = &contents.ema {
        save_map(ema, &dir.join(EMA_FILE))?;
    }
    write_json(&dir.join(SIDECAR_FILE), &meta)
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    read_json(&dir.join(SIDECAR_FILE))
}

/// A model rebuilt from a checkpoint.
pub struct LoadedCheckpoint {
    pub dir: PathBuf,
    pub meta: CheckpointMeta,
    pub store: ParamStore,
    pub model: UNet,
}

impl LoadedCheckpoint {
    pub fn optimizer_state(&self) -> Result<Option<BTreeMap<String, Tensor>>> {
        if !self.meta.has_optimizer {
            return Ok(None);
        }
        load_tensors(&self.dir.join(OPTIMIZER_FILE), self.store.device()).map(Some)
    }

    pub fn ema_weights(&self) -> Result<Option<BTreeMap<String, Tensor>>> {
        if !self.meta.has_ema {
            return Ok(None);
        }
        load_tensors(&self.dir.join(EMA_FILE), self.store.device()).map(Some)
    }

    /// Replaces the live weights by the EMA copy, when one was stored.
    pub fn use_ema(&self) -> Result<bool> {
        match self.ema_weights()? {
            Some(ema) => {
                self.store.assign(&ema)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }
}

/// Rebuilds the network described by the sidecar and loads its weights.
pub fn load_checkpoint(dir: &Path, device: &Device, dtype: DType) -> Result<LoadedCheckpoint> {
    let meta = read_meta(dir)?;
    let mut store = ParamStore::new(meta.seed, device, dtype);
    let model = UNet::new(&meta.model, &mut store)?;
    store.load(&dir.join(WEIGHTS_FILE))?;
    Ok(LoadedCheckpoint {
        dir: dir.to_path_buf(),
        meta,
        store,
        model,
    })
}
