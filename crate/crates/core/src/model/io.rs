//! Model weight file: little-endian binary with a JSON sidecar.
//!
//! ```text
//! "CLAB" | u32 version | u32 num_layers | u32 num_heads | u32 head_dim
//!        | u32 model_dim | u32 vocab_size | u32 max_positions | f64 rope_base
//!        | f32 tensors in declared order
//! ```
//!
//! The sidecar `<file>.json` repeats the config and records the seed and the
//! number of pre-training steps.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::Real;

use super::{FrozenModel, ModelConfig, ModelProvenance, Weights};

pub const MODEL_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CLAB";
const HEADER_LEN: usize = 4 + 4 + 6 * 4 + 8;

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    config: ModelConfig,
    seed: u64,
    pretrain_steps: u64,
    digest_f32: String,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode_model<T: Real>(model: &FrozenModel<T>) -> Vec<u8> {
    let c = model.config();
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    for v in [
        c.num_layers,
        c.num_heads,
        c.head_dim,
        c.model_dim,
        c.vocab_size,
        c.max_positions,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&c.rope_base.to_le_bytes());
    for t in model.weights().tensors() {
        for x in t {
            out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_model(bytes: &[u8], provenance: ModelProvenance) -> Result<FrozenModel<f32>> {
    if bytes.len() < HEADER_LEN {
        return Err(LabError::Format("model file shorter than header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(LabError::Format("bad model magic".into()));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != MODEL_FORMAT_VERSION {
        return Err(LabError::UnsupportedVersion {
            what: "model",
            found: version,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    let f: Vec<usize> = (0..6).map(|i| u32_at(8 + 4 * i) as usize).collect();
    let rope_base = f64::from_le_bytes(bytes[32..40].try_into().unwrap());
    let config = ModelConfig {
        num_layers: f[0],
        num_heads: f[1],
        head_dim: f[2],
        model_dim: f[3],
        vocab_size: f[4],
        max_positions: f[5],
        rope_base,
    };
    config
        .validate()
        .map_err(|e| LabError::Format(format!("bad model config: {e}")))?;
    let mut weights = Weights::<f32>::zeros(&config);
    let need: usize = weights.tensors().iter().map(|t| t.len()).sum::<usize>() * 4;
    let body = &bytes[HEADER_LEN..];
    if body.len() != need {
        return Err(LabError::Format(format!(
            "model body has {} bytes, expected {need}",
            body.len()
        )));
    }
    let mut chunks = body.chunks_exact(4);
    for t in weights.tensors_mut() {
        for x in t.iter_mut() {
            *x = f32::from_le_bytes(chunks.next().unwrap().try_into().unwrap());
        }
    }
    FrozenModel::from_weights(config, weights, provenance)
        .map_err(|e| LabError::Format(format!("bad model weights: {e}")))
}

/// Writes the binary file and its `.json` sidecar. Weights are stored as `f32`.
pub fn save_model<T: Real>(model: &FrozenModel<T>, path: &Path) -> Result<()> {
    let bytes = encode_model(model);
    fs::write(path, &bytes)?;
    let sidecar = Sidecar {
        format_version: MODEL_FORMAT_VERSION,
        config: *model.config(),
        seed: model.provenance().seed,
        pretrain_steps: model.provenance().pretrain_steps,
        digest_f32: crate::bytes_digest(&bytes),
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

/// Loads a model written by [`save_model`]. The sidecar is optional; without
/// it the provenance defaults to zeros.
pub fn load_model(path: &Path) -> Result<FrozenModel<f32>> {
    let bytes = fs::read(path)?;
    let provenance = match fs::read_to_string(sidecar_path(path)) {
        Ok(s) => {
            let side: Sidecar = serde_json::from_str(&s)?;
            ModelProvenance {
                seed: side.seed,
                pretrain_steps: side.pretrain_steps,
            }
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => ModelProvenance::default(),
        Err(e) => return Err(e.into()),
    };
    decode_model(&bytes, provenance)
}
