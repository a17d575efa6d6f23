//! Binary model checkpoints.
//!
//! Layout: an 8-byte little-endian manifest length, the JSON manifest, then
//! a raw little-endian scalar payload. The manifest echoes the model
//! configuration, names every tensor with its shape and byte offset, and
//! records the training step and rng state, so a load rebuilds the exact
//! training position. Saving, loading and saving again produces
//! byte-identical files.

use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::model::{build_model, Model, ModelConfig};
use crate::optim::AdamState;
use crate::rng::Rng;
use crate::tensor::{DType, Scalar, Tensor};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AdamMeta {
    pub step: u64,
}

/// Versioned description of everything in a checkpoint file.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub config: ModelConfig,
    pub step: u64,
    pub rng_state: u64,
    pub dtype: DType,
    pub adam: Option<AdamMeta>,
    pub params: Vec<ManifestEntry>,
    pub payload_bytes: u64,
}

/// A checkpoint read back from disk.
pub struct LoadedCheckpoint<S: Scalar> {
    pub model: Model<S>,
    pub step: u64,
    pub rng: Rng,
    pub adam: Option<AdamState<S>>,
}

/// Serialize model parameters (and optimizer moments, when resuming must be
/// possible) with the training step and rng state.
pub fn save_checkpoint<S: Scalar>(
    model: &Model<S>,
    step: u64,
    rng: &Rng,
    adam: Option<&AdamState<S>>,
    path: &Path,
) -> Result<()> {
    let elem = S::DTYPE.size_in_bytes() as u64;
    let mut entries = Vec::new();
    let mut offset = 0u64;
    let mut payload: Vec<u8> = Vec::new();

    let push_tensor = |name: String, t: &Tensor<S>, entries: &mut Vec<ManifestEntry>, offset: &mut u64, payload: &mut Vec<u8>| {
        entries.push(ManifestEntry {
            name,
            shape: t.shape().to_vec(),
            offset: *offset,
        });
        for &v in t.data() {
            v.write_le(payload);
        }
        *offset += t.numel() as u64 * elem;
    };

    for (_, p) in model.store.iter() {
        push_tensor(p.name.clone(), &p.value, &mut entries, &mut offset, &mut payload);
    }
    if let Some(state) = adam {
        for (i, (_, p)) in model.store.iter().enumerate() {
            push_tensor(
                format!("optim.m.{}", p.name),
                &state.m[i],
                &mut entries,
                &mut offset,
                &mut payload,
            );
        }
        for (i, (_, p)) in model.store.iter().enumerate() {
            push_tensor(
                format!("optim.v.{}", p.name),
                &state.v[i],
                &mut entries,
                &mut offset,
                &mut payload,
            );
        }
    }

    let manifest = CheckpointManifest {
        schema_version: SCHEMA_VERSION,
        config: model.cfg.clone(),
        step,
        rng_state: rng.state(),
        dtype: S::DTYPE,
        adam: adam.map(|s| AdamMeta { step: s.t }),
        params: entries,
        payload_bytes: payload.len() as u64,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| CheckpointError::Manifest(format!("serialization failed: {e}")))?;

    let mut out = Vec::with_capacity(8 + manifest_bytes.len() + payload.len());
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    out.extend_from_slice(&payload);
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read just the manifest.
pub fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_manifest(&bytes).map(|(m, _)| m)
}

fn parse_manifest(bytes: &[u8]) -> Result<(CheckpointManifest, usize)> {
    if bytes.len() < 8 {
        return Err(CheckpointError::Truncated {
            detail: format!("file holds only {} bytes", bytes.len()),
        }
        .into());
    }
    let manifest_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + manifest_len {
        return Err(CheckpointError::Truncated {
            detail: "manifest runs past end of file".into(),
        }
        .into());
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[8..8 + manifest_len])
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: manifest.schema_version,
            expected: SCHEMA_VERSION,
        }
        .into());
    }
    Ok((manifest, 8 + manifest_len))
}

/// Reconstruct a model (and optimizer state, when present) bit-exactly.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<LoadedCheckpoint<S>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let (manifest, payload_start) = parse_manifest(&bytes)?;
    if manifest.dtype != S::DTYPE {
        return Err(CheckpointError::DtypeMismatch {
            found: manifest.dtype.name().into(),
            expected: S::DTYPE.name().into(),
        }
        .into());
    }
    let payload = &bytes[payload_start..];
    if payload.len() as u64 != manifest.payload_bytes {
        return Err(CheckpointError::Truncated {
            detail: format!(
                "payload holds {} bytes, manifest promises {}",
                payload.len(),
                manifest.payload_bytes
            ),
        }
        .into());
    }

    // entries must tile the payload contiguously, in order
    let mut expected_offset = 0u64;
    for entry in &manifest.params {
        if entry.offset != expected_offset {
            return Err(CheckpointError::Manifest(format!(
                "tensor '{}' at offset {}, expected {expected_offset}",
                entry.name, entry.offset
            ))
            .into());
        }
        let numel: u64 = entry.shape.iter().product::<usize>() as u64;
        expected_offset += numel * manifest.dtype.size_in_bytes() as u64;
    }
    if expected_offset != manifest.payload_bytes {
        return Err(CheckpointError::Truncated {
            detail: format!(
                "entries cover {expected_offset} bytes, payload holds {}",
                manifest.payload_bytes
            ),
        }
        .into());
    }

    let elem = S::DTYPE.size_in_bytes() as u64;
    let read_tensor = |entry: &ManifestEntry| -> Result<Tensor<S>> {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset;
        let end = start + numel as u64 * elem;
        if end > payload.len() as u64 {
            return Err(CheckpointError::Truncated {
                detail: format!("tensor '{}' runs past payload end", entry.name),
            }
            .into());
        }
        let raw = &payload[start as usize..end as usize];
        let data: Vec<S> = raw
            .chunks_exact(elem as usize)
            .map(|c| S::read_le(c))
            .collect();
        Tensor::from_vec(entry.shape.clone(), data)
    };

    // Rebuild the skeleton from the embedded config, then overwrite values.
    let mut skeleton_rng = Rng::new(0);
    let mut model = build_model::<S>(&manifest.config, &mut skeleton_rng)?;
    let n_params = model.store.len();

    let expected_entries = if manifest.adam.is_some() {
        3 * n_params
    } else {
        n_params
    };
    if manifest.params.len() != expected_entries {
        return Err(CheckpointError::NameMismatch {
            detail: format!(
                "manifest lists {} tensors, model implies {expected_entries}",
                manifest.params.len()
            ),
        }
        .into());
    }

    let ids: Vec<crate::params::ParamId> = model.store.iter().map(|(id, _)| id).collect();
    for (i, &id) in ids.iter().enumerate() {
        let entry = &manifest.params[i];
        {
            let param = model.store.get(id);
            if entry.name != param.name {
                return Err(CheckpointError::NameMismatch {
                    detail: format!(
                        "expected '{}' at slot {i}, found '{}'",
                        param.name, entry.name
                    ),
                }
                .into());
            }
            if entry.shape != param.value.shape() {
                return Err(CheckpointError::NameMismatch {
                    detail: format!(
                        "tensor '{}' has shape {:?}, model expects {:?}",
                        entry.name,
                        entry.shape,
                        param.value.shape()
                    ),
                }
                .into());
            }
        }
        model.store.get_mut(id).value = read_tensor(entry)?;
    }

    let adam = match &manifest.adam {
        None => None,
        Some(meta) => {
            let mut state = AdamState::zeros_like(&model.store);
            state.t = meta.step;
            for (i, &id) in ids.iter().enumerate() {
                let name = model.store.get(id).name.clone();
                let m_entry = &manifest.params[n_params + i];
                let v_entry = &manifest.params[2 * n_params + i];
                if m_entry.name != format!("optim.m.{name}")
                    || v_entry.name != format!("optim.v.{name}")
                {
                    return Err(CheckpointError::NameMismatch {
                        detail: format!("optimizer entries for '{name}' are missing or misplaced"),
                    }
                    .into());
                }
                state.m[i] = read_tensor(m_entry)?;
                state.v[i] = read_tensor(v_entry)?;
            }
            Some(state)
        }
    };

    Ok(LoadedCheckpoint {
        model,
        step: manifest.step,
        rng: Rng::from_state(manifest.rng_state),
        adam,
    })
}
