use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::enhance::{EnhancementModel, UNetConfig};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::optim::AdamState;

pub const CHECKPOINT_FORMAT: &str = "rave-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const META_KEY: &str = "rave";

/// Where a run stands in its phase sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum Position {
    GuidanceInit { step: u64 },
    Enhance { iter: u64 },
    RefineGuidance { round: u32, step: u64 },
    RefineEnhance { round: u32, step: u64 },
    Done,
}

/// One optimizer step's loss terms; absent terms were not part of the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub phase: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub identity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub clip: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub guidance: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub step: u64,
    pub file: String,
    pub sha256: String,
}

/// Append-only record of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: BTreeMap<String, String>,
    pub backend_model_id: String,
    pub backend_checksum: String,
    pub dataset_fingerprint: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub residual_dataset_fingerprint: Option<String>,
    pub initial_model_checksum: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub guidance_init_steps: Option<u64>,
    pub losses: Vec<LossRecord>,
    pub checkpoints: Vec<CheckpointEntry>,
}

impl RunManifest {
    pub fn push_loss(&mut self, record: LossRecord) {
        self.losses.push(record);
    }

    pub fn push_checkpoint(&mut self, entry: CheckpointEntry) {
        self.checkpoints.push(entry);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("manifest: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    unet: UNetConfig,
    position: Position,
    global_step: u64,
    guidance_kind: Option<String>,
    adam_enhance_step: u64,
    adam_guidance_step: Option<u64>,
    has_snapshot: bool,
    manifest: RunManifest,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct CheckpointState {
    pub unet: UNetConfig,
    pub position: Position,
    pub global_step: u64,
    pub model: Vec<(String, Tensor)>,
    pub snapshot: Option<Vec<(String, Tensor)>>,
    pub guidance_kind: Option<String>,
    pub guidance: Vec<(String, Tensor)>,
    pub adam_enhance: AdamState,
    pub adam_guidance: Option<AdamState>,
    pub manifest: RunManifest,
}

fn f32_cpu(t: &Tensor) -> Result<Tensor> {
    Ok(t.detach().to_dtype(DType::F32)?.to_device(&Device::Cpu)?)
}

/// Serializes to a safetensors container with one JSON metadata entry.
pub fn encode_checkpoint(state: &CheckpointState) -> Result<Vec<u8>> {
    let header = Header {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        unet: state.unet.clone(),
        position: state.position,
        global_step: state.global_step,
        guidance_kind: state.guidance_kind.clone(),
        adam_enhance_step: state.adam_enhance.step,
        adam_guidance_step: state.adam_guidance.as_ref().map(|s| s.step),
        has_snapshot: state.snapshot.is_some(),
        manifest: state.manifest.clone(),
    };
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for (n, t) in &state.model {
        tensors.push((format!("model.{n}"), f32_cpu(t)?));
    }
    if let Some(snap) = &state.snapshot {
        for (n, t) in snap {
            tensors.push((format!("snapshot.{n}"), f32_cpu(t)?));
        }
    }
    for (n, t) in &state.guidance {
        tensors.push((n.clone(), f32_cpu(t)?));
    }
    let mut push_adam = |prefix: &str, s: &AdamState| -> Result<()> {
        for (i, (m, v)) in s.first.iter().zip(&s.second).enumerate() {
            tensors.push((format!("{prefix}.m.{i:04}"), f32_cpu(m)?));
            tensors.push((format!("{prefix}.v.{i:04}"), f32_cpu(v)?));
        }
        Ok(())
    };
    push_adam("adam.enhance", &state.adam_enhance)?;
    if let Some(s) = &state.adam_guidance {
        push_adam("adam.guidance", s)?;
    }
    let meta = HashMap::from([(
        META_KEY.to_string(),
        serde_json::to_string(&header).expect("header serializes"),
    )]);
    safetensors::serialize(tensors, Some(meta))
        .map_err(|e| Error::Format(format!("checkpoint: {e}")))
}

fn read_header(bytes: &[u8]) -> Result<Header> {
    let (_, meta) = safetensors::SafeTensors::read_metadata(bytes)
        .map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
    let raw = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Format("not a training checkpoint (metadata missing)".into()))?;
    let header: Header =
        serde_json::from_str(raw).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!(
            "unexpected checkpoint format `{}`",
            header.format
        )));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            header.version
        )));
    }
    Ok(header)
}

fn take_prefixed(all: &BTreeMap<String, Tensor>, prefix: &str) -> Vec<(String, Tensor)> {
    all.iter()
        .filter_map(|(k, t)| k.strip_prefix(prefix).map(|n| (n.to_string(), t.clone())))
        .collect()
}

fn adam_state(all: &BTreeMap<String, Tensor>, prefix: &str, step: u64) -> Result<AdamState> {
    let first: Vec<Tensor> = take_prefixed(all, &format!("{prefix}.m."))
        .into_iter()
        .map(|(_, t)| t)
        .collect();
    let second: Vec<Tensor> = take_prefixed(all, &format!("{prefix}.v."))
        .into_iter()
        .map(|(_, t)| t)
        .collect();
    if first.len() != second.len() {
        return Err(Error::Format(format!("{prefix}: moment counts differ")));
    }
    Ok(AdamState {
        step,
        first,
        second,
    })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<CheckpointState> {
    let header = read_header(bytes)?;
    let all: BTreeMap<String, Tensor> = candle_core::safetensors::load_buffer(bytes, &Device::Cpu)?
        .into_iter()
        .collect();
    let model = take_prefixed(&all, "model.");
    let snapshot = header
        .has_snapshot
        .then(|| take_prefixed(&all, "snapshot."));
    let guidance: Vec<(String, Tensor)> = all
        .iter()
        .filter(|(k, _)| k.starts_with("guidance."))
        .map(|(k, t)| (k.clone(), t.clone()))
        .collect();
    let adam_enhance = adam_state(&all, "adam.enhance", header.adam_enhance_step)?;
    let adam_guidance = match header.adam_guidance_step {
        Some(step) => Some(adam_state(&all, "adam.guidance", step)?),
        None => None,
    };
    Ok(CheckpointState {
        unet: header.unet,
        position: header.position,
        global_step: header.global_step,
        model,
        snapshot,
        guidance_kind: header.guidance_kind,
        guidance,
        adam_enhance,
        adam_guidance,
        manifest: header.manifest,
    })
}

/// Writes atomically and returns the file's sha256.
pub fn save_checkpoint(state: &CheckpointState, path: &Path) -> Result<String> {
    let bytes = encode_checkpoint(state)?;
    write_atomic(path, &bytes)?;
    Ok(crate::ops::sha256_hex(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Rebuilds the enhancement model stored in a checkpoint.
pub fn load_model(path: &Path, device: &Device, dtype: DType) -> Result<EnhancementModel> {
    let state = load_checkpoint(path)?;
    model_from_state(&state, &state.unet, device, dtype)
}

/// Loads the checkpoint's weights into a model built from `unet`; the
/// architectures must agree.
pub fn model_from_state(
    state: &CheckpointState,
    unet: &UNetConfig,
    device: &Device,
    dtype: DType,
) -> Result<EnhancementModel> {
    if state.unet.depth != unet.depth || state.unet.base_channels != unet.base_channels {
        return Err(Error::Format(format!(
            "checkpoint architecture (depth {}, channels {}) does not match the requested (depth {}, channels {})",
            state.unet.depth, state.unet.base_channels, unet.depth, unet.base_channels
        )));
    }
    let model = EnhancementModel::build(unet, 0, device, dtype)?;
    model.params().load(&state.model)?;
    Ok(model)
}
