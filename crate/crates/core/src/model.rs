//! Trained-model files: a JSON manifest plus, for network remaps, a sidecar
//! blob of little-endian `f64` weights and batch-norm statistics.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LlfError, Result};
use crate::remap::mlp::{MlpRemap, Mode, PretrainOutcome};
use crate::remap::{MonotonicityReport, OrigRemap};
use crate::train::{EpochLoss, NormLayer, RemapModel, TrainConfig, TrainedModel};

pub const FORMAT: &str = "llfstyle-model";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RemapEntry {
    Orig(OrigRemap),
    Mlp {
        /// File name relative to the manifest.
        weights: String,
        sha256: String,
        num_params: usize,
        num_buffers: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub remap: RemapEntry,
    pub norm: Option<NormLayer>,
    pub config: TrainConfig,
    pub final_loss: Option<f64>,
    pub history: Vec<EpochLoss>,
    pub monotonicity: MonotonicityReport,
    pub pretrain: Option<PretrainOutcome>,
}

/// Blob path next to a manifest: `model.json` -> `model.weights.bin`.
pub fn weights_path(manifest: &Path) -> PathBuf {
    let stem = manifest
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model");
    manifest.with_file_name(format!("{stem}.weights.bin"))
}

fn encode(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn decode(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    let remap = match &model.remap {
        RemapModel::Orig(r) => RemapEntry::Orig(*r),
        RemapModel::Mlp(m) => {
            if m.mode() != Mode::Inference {
                return Err(LlfError::TrainingMode);
            }
            let mut values = m.params();
            values.extend(m.buffers());
            let blob = encode(&values);
            let blob_path = weights_path(path);
            std::fs::write(&blob_path, &blob).map_err(|e| LlfError::io(&blob_path, e))?;
            RemapEntry::Mlp {
                weights: blob_path
                    .file_name()
                    .and_then(|n| n.to_str())
                    .unwrap_or_default()
                    .to_string(),
                sha256: hex::encode(Sha256::digest(&blob)),
                num_params: m.num_params(),
                num_buffers: m.num_buffers(),
            }
        }
    };
    let manifest = Manifest {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        remap,
        norm: model.norm,
        config: model.config,
        final_loss: model.final_loss,
        history: model.history.clone(),
        monotonicity: model.monotonicity.clone(),
        pretrain: model.pretrain,
    };
    let json =
        serde_json::to_string_pretty(&manifest).map_err(|e| LlfError::Model(e.to_string()))?;
    std::fs::write(path, json + "\n").map_err(|e| LlfError::io(path, e))
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let text = std::fs::read_to_string(path).map_err(|e| LlfError::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| LlfError::Model(format!("{}: {e}", path.display())))?;
    if manifest.format != FORMAT || manifest.version != FORMAT_VERSION {
        return Err(LlfError::Model(format!(
            "unsupported model format {} v{}",
            manifest.format, manifest.version
        )));
    }
    let remap = match manifest.remap {
        RemapEntry::Orig(r) => {
            r.validate()?;
            RemapModel::Orig(r)
        }
        RemapEntry::Mlp {
            weights,
            sha256,
            num_params,
            num_buffers,
        } => {
            let blob_path = path.with_file_name(&weights);
            let blob = std::fs::read(&blob_path).map_err(|e| LlfError::io(&blob_path, e))?;
            if hex::encode(Sha256::digest(&blob)) != sha256 {
                return Err(LlfError::Model(format!(
                    "checksum mismatch for {}",
                    blob_path.display()
                )));
            }
            let mut m = MlpRemap::zeros();
            if num_params != m.num_params()
                || num_buffers != m.num_buffers()
                || blob.len() != 8 * (num_params + num_buffers)
            {
                return Err(LlfError::Model(
                    "weight blob does not match the network layout".into(),
                ));
            }
            let values = decode(&blob);
            m.set_params(&values[..num_params]);
            m.set_buffers(&values[num_params..]);
            m.set_mode(Mode::Inference);
            RemapModel::Mlp(m)
        }
    };
    Ok(TrainedModel {
        remap,
        norm: manifest.norm,
        config: manifest.config,
        final_loss: manifest.final_loss,
        history: manifest.history,
        monotonicity: manifest.monotonicity,
        pretrain: manifest.pretrain,
    })
}

/// One JSON object per epoch.
pub fn loss_log(history: &[EpochLoss]) -> String {
    history
        .iter()
        .map(|h| serde_json::to_string(h).expect("plain struct serializes") + "\n")
        .collect()
}
