//! Checkpoint files: a JSON manifest (seed, step, schedule, config
//! echo, name to shape/offset table) followed by one contiguous
//! little-endian float payload holding parameters and Adam moments.
//!
//! The payload element width follows the run precision. In 32-bit mode
//! parameters and moments are rounded through f32 after every update,
//! so the narrow payload is still a lossless image of the run state;
//! 64-bit runs write 8-byte elements and round-trip bit-exactly.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::graph::{Precision, Tensor};
use crate::optim::{AdamState, WarmupSchedule};
use crate::params::ParamStore;

const MAGIC: &[u8; 4] = b"JEDC";
const VERSION: u32 = 1;

/// Run state identifying a checkpoint beyond its tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub step: u64,
    pub precision: Precision,
    pub schedule: WarmupSchedule,
    /// Producing stage, e.g. "pretrain" or "finetune:joint_enc_dec".
    #[serde(default)]
    pub stage: Option<String>,
    /// Opaque echo of the experiment config the run was started with.
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    /// Element offset of the parameter data in the payload.
    offset: u64,
    /// Element offset of the Adam first moment; the second moment
    /// follows immediately after. Absent for tensors never stepped.
    moments: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    step: u64,
    precision: Precision,
    schedule: WarmupSchedule,
    #[serde(default)]
    stage: Option<String>,
    config: serde_json::Value,
    tensors: BTreeMap<String, TensorEntry>,
}

fn elem_width(p: Precision) -> usize {
    match p {
        Precision::F32 => 4,
        Precision::F64 => 8,
    }
}

fn write_floats(out: &mut Vec<u8>, data: &[f64], p: Precision) {
    match p {
        Precision::F32 => {
            for &v in data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Precision::F64 => {
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

fn read_floats(bytes: &[u8], offset_elems: u64, n: usize, p: Precision) -> Result<Vec<f64>> {
    let w = elem_width(p);
    let start = offset_elems as usize * w;
    let end = start + n * w;
    if end > bytes.len() {
        return Err(CoreError::Checkpoint(format!(
            "payload range {}..{} exceeds {} bytes",
            start,
            end,
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(n);
    match p {
        Precision::F32 => {
            for chunk in bytes[start..end].chunks_exact(4) {
                out.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
        }
        Precision::F64 => {
            for chunk in bytes[start..end].chunks_exact(8) {
                out.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
    }
    Ok(out)
}

/// Writes a checkpoint atomically (temp file then rename).
pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    params: &ParamStore,
    opt: &BTreeMap<String, AdamState>,
) -> Result<()> {
    for name in opt.keys() {
        if !params.contains(name) {
            return Err(CoreError::Checkpoint(format!(
                "optimizer state for unknown tensor '{}'",
                name
            )));
        }
    }

    let mut tensors = BTreeMap::new();
    let mut cursor: u64 = 0;
    for (name, tensor) in params.iter() {
        let numel = tensor.data.len() as u64;
        let offset = cursor;
        cursor += numel;
        let moments = match opt.get(name) {
            Some(state) => {
                if state.m.len() != tensor.data.len() {
                    return Err(CoreError::Checkpoint(format!(
                        "moment size {} mismatches tensor '{}' size {}",
                        state.m.len(),
                        name,
                        tensor.data.len()
                    )));
                }
                let at = cursor;
                cursor += 2 * numel;
                Some(at)
            }
            None => None,
        };
        tensors
            .insert(name.to_string(), TensorEntry { shape: tensor.shape.clone(), offset, moments });
    }

    let manifest = Manifest {
        seed: meta.seed,
        step: meta.step,
        precision: meta.precision,
        schedule: meta.schedule,
        stage: meta.stage.clone(),
        config: meta.config.clone(),
        tensors,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| CoreError::Checkpoint(format!("manifest encode: {}", e)))?;

    let mut out = Vec::with_capacity(
        16 + manifest_bytes.len() + cursor as usize * elem_width(meta.precision),
    );
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    for (name, tensor) in params.iter() {
        write_floats(&mut out, &tensor.data, meta.precision);
        if let Some(state) = opt.get(name) {
            write_floats(&mut out, &state.m, meta.precision);
            write_floats(&mut out, &state.v, meta.precision);
        }
    }

    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&out)?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint back into a parameter store and optimizer map.
pub fn load_checkpoint(
    path: &Path,
) -> Result<(CheckpointMeta, ParamStore, BTreeMap<String, AdamState>)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 {
        return Err(CoreError::Checkpoint(format!("file too short: {} bytes", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(CoreError::Checkpoint(format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CoreError::Checkpoint(format!(
            "version {} unsupported (expected {})",
            version, VERSION
        )));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if 16 + manifest_len > bytes.len() {
        return Err(CoreError::Checkpoint(format!(
            "manifest length {} exceeds file size {}",
            manifest_len,
            bytes.len()
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + manifest_len])
        .map_err(|e| CoreError::Checkpoint(format!("manifest decode: {}", e)))?;
    let payload = &bytes[16 + manifest_len..];

    let mut params = ParamStore::new();
    let mut opt = BTreeMap::new();
    for (name, entry) in &manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        let data = read_floats(payload, entry.offset, numel, manifest.precision)?;
        params.insert(name, Tensor::new(data, entry.shape.clone())?)?;
        if let Some(at) = entry.moments {
            let m = read_floats(payload, at, numel, manifest.precision)?;
            let v = read_floats(payload, at + numel as u64, numel, manifest.precision)?;
            opt.insert(name.clone(), AdamState { m, v });
        }
    }

    let meta = CheckpointMeta {
        seed: manifest.seed,
        step: manifest.step,
        precision: manifest.precision,
        schedule: manifest.schedule,
        stage: manifest.stage,
        config: manifest.config,
    };
    Ok((meta, params, opt))
}

fn diff_value(prefix: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(ma), Value::Object(mb)) => {
            let keys: std::collections::BTreeSet<&String> = ma.keys().chain(mb.keys()).collect();
            for key in keys {
                let path =
                    if prefix.is_empty() { key.to_string() } else { format!("{}.{}", prefix, key) };
                match (ma.get(key.as_str()), mb.get(key.as_str())) {
                    (Some(va), Some(vb)) => diff_value(&path, va, vb, out),
                    _ => out.push(path),
                }
            }
        }
        (Value::Array(va), Value::Array(vb)) => {
            if va.len() != vb.len() {
                out.push(prefix.to_string());
            } else {
                for (i, (x, y)) in va.iter().zip(vb).enumerate() {
                    diff_value(&format!("{}[{}]", prefix, i), x, y, out);
                }
            }
        }
        _ => {
            if a != b {
                out.push(prefix.to_string());
            }
        }
    }
}

/// Lists dotted paths where the two config echoes diverge.
pub fn config_mismatch(expected: &serde_json::Value, found: &serde_json::Value) -> Vec<String> {
    let mut out = Vec::new();
    diff_value("", expected, found, &mut out);
    out
}

/// Errors with the full list of diverging fields when the echoes differ.
pub fn check_config(expected: &serde_json::Value, found: &serde_json::Value) -> Result<()> {
    let diff = config_mismatch(expected, found);
    if diff.is_empty() {
        Ok(())
    } else {
        Err(CoreError::ConfigDiff(diff))
    }
}
