//! On-disk training state: a directory per snapshot holding
//! `model.safetensors`, `optimizer.safetensors` and `meta.json`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DataCursor, TrainState};
use crate::bottleneck::ModelDims;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::losses::LayerWeights;
use crate::networks::PartSegModel;
use crate::optim::Adam;

pub const MODEL_FILE: &str = "model.safetensors";
pub const OPTIMIZER_FILE: &str = "optimizer.safetensors";
pub const META_FILE: &str = "meta.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub step: u64,
    pub dims: ModelDims,
    pub config_hash: String,
    /// The configuration that produced the run, so inference needs nothing else.
    pub config: TrainConfig,
    pub adam_step: u64,
    pub layer_weights: LayerWeights,
    pub rng: ChaCha8Rng,
    pub data: DataCursor,
    /// SHA-256 of each tensor file, hex encoded.
    pub checksums: HashMap<String, String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_tensors(tensors: &HashMap<String, Tensor>, path: &Path) -> Result<()> {
    // serialize in memory first so a full disk surfaces as an i/o error
    let mut data: Vec<(&String, &Tensor)> = tensors.iter().collect();
    data.sort_by(|a, b| a.0.cmp(b.0));
    let bytes = safetensors::serialize(data, None)
        .map_err(|e| Error::InvalidInput(format!("serializing {}: {e}", path.display())))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a snapshot of `state` into `dir`, replacing any previous contents.
pub fn save_checkpoint(state: &TrainState, config: &TrainConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut checksums = HashMap::new();
    for (file, tensors) in [
        (MODEL_FILE, state.model.params().to_tensors()),
        (OPTIMIZER_FILE, state.optimizer.to_tensors()),
    ] {
        let path = dir.join(file);
        write_tensors(&tensors, &path)?;
        checksums.insert(file.to_string(), sha256_file(&path)?);
    }
    let meta = CheckpointMeta {
        version: FORMAT_VERSION,
        step: state.step,
        dims: state.model.dims,
        config_hash: config.hash(),
        config: config.clone(),
        adam_step: state.optimizer.step,
        layer_weights: state.layer_weights.clone(),
        rng: state.rng.clone(),
        data: state.data.clone(),
        checksums,
    };
    let path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(&meta)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn integrity(dir: &Path, reason: impl Into<String>) -> Error {
    Error::Integrity {
        path: dir.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads `meta.json` and verifies both tensor files against their checksums.
pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    if !path.exists() {
        return Err(integrity(dir, format!("{META_FILE} is missing")));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)
        .map_err(|e| integrity(dir, format!("{META_FILE} is unreadable: {e}")))?;
    if meta.version != FORMAT_VERSION {
        return Err(integrity(
            dir,
            format!("format version {} is not supported", meta.version),
        ));
    }
    for file in [MODEL_FILE, OPTIMIZER_FILE] {
        let p = dir.join(file);
        if !p.exists() {
            return Err(integrity(dir, format!("{file} is missing")));
        }
        let expected = meta
            .checksums
            .get(file)
            .ok_or_else(|| integrity(dir, format!("no checksum recorded for {file}")))?;
        if sha256_file(&p)? != *expected {
            return Err(integrity(dir, format!("{file} does not match its checksum")));
        }
    }
    Ok(meta)
}

fn load_tensors(dir: &Path, file: &str, device: &Device) -> Result<HashMap<String, Tensor>> {
    candle_core::safetensors::load(dir.join(file), device)
        .map_err(|e| integrity(dir, format!("{file}: {e}")))
}

fn check_dims(found: &ModelDims, expected: &ModelDims) -> Result<()> {
    if found != expected {
        return Err(Error::Shape(format!(
            "checkpoint has K={} L={} grid {}x{} at {}px, config expects K={} L={} grid {}x{} at {}px",
            found.parts,
            found.appearance_dim,
            found.grid_h,
            found.grid_w,
            found.image_size,
            expected.parts,
            expected.appearance_dim,
            expected.grid_h,
            expected.grid_w,
            expected.image_size
        )));
    }
    Ok(())
}

/// Restores a full training state for `config`. Dimension mismatches are
/// reported before the configuration hash is compared.
pub fn load_checkpoint(
    dir: &Path,
    config: &TrainConfig,
    dtype: DType,
    device: &Device,
) -> Result<TrainState> {
    let meta = read_meta(dir)?;
    check_dims(&meta.dims, &config.dims()?)?;
    let expected = config.hash();
    if meta.config_hash != expected {
        return Err(Error::ConfigHashMismatch {
            expected,
            found: meta.config_hash,
        });
    }
    let model = PartSegModel::new(
        &config.model.network(),
        config.model.parts,
        config.dataset.image_size,
        dtype,
        device,
    )?;
    model.params().assign(&load_tensors(dir, MODEL_FILE, device)?)?;
    let moments = load_tensors(dir, OPTIMIZER_FILE, device)?
        .into_iter()
        .map(|(k, t)| Ok((k, t.to_dtype(dtype)?)))
        .collect::<Result<HashMap<_, _>>>()?;
    Ok(TrainState {
        model,
        optimizer: Adam::from_tensors(config.optimizer, meta.adam_step, moments),
        layer_weights: meta.layer_weights,
        step: meta.step,
        rng: meta.rng,
        data: meta.data,
    })
}

/// Loads only the model, using the configuration stored alongside it.
pub fn load_model(dir: &Path, dtype: DType, device: &Device) -> Result<(PartSegModel, CheckpointMeta)> {
    let meta = read_meta(dir)?;
    let cfg = &meta.config;
    let model = PartSegModel::new(
        &cfg.model.network(),
        cfg.model.parts,
        cfg.dataset.image_size,
        dtype,
        device,
    )?;
    check_dims(&meta.dims, &model.dims)?;
    model.params().assign(&load_tensors(dir, MODEL_FILE, device)?)?;
    Ok((model, meta))
}

/// Directory name for the snapshot taken after `step` updates.
pub fn checkpoint_path(root: &Path, step: u64) -> PathBuf {
    root.join(format!("step-{step:07}"))
}

/// The snapshot with the highest step under `root`, if any.
pub fn latest_checkpoint(root: &Path) -> Option<PathBuf> {
    let entries = fs::read_dir(root).ok()?;
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let step: u64 = name.strip_prefix("step-")?.parse().ok()?;
            e.path().join(META_FILE).exists().then_some((step, e.path()))
        })
        .max_by_key(|(s, _)| *s)
        .map(|(_, p)| p)
}
