//! Weight files.
//!
//! Layout: magic `PMCK`, `u32` format version, `u64` manifest length, JSON
//! manifest, little-endian tensor data, and a SHA-256 digest of everything
//! before it.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, PoseMamba};
use crate::error::{PoseError, Result};
use crate::numerics::{Precision, Scalar, Tensor};
use crate::scan_orders::Skeleton;

const MAGIC: &[u8; 4] = b"PMCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    skeleton: Skeleton,
    dtype: Precision,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the data section.
    offset: usize,
}

fn bad(msg: impl Into<String>) -> PoseError {
    PoseError::Checkpoint(msg.into())
}

pub fn save_checkpoint<T: Scalar>(model: &PoseMamba<T>, path: &Path) -> Result<()> {
    let width = T::PRECISION.bits() as usize / 8;
    let mut tensors = Vec::new();
    let mut data = Vec::new();
    model.params.visit(&mut |name, t| {
        tensors.push(Entry {
            name,
            shape: t.shape().to_vec(),
            offset: data.len(),
        });
        for &v in t.data() {
            match T::PRECISION {
                Precision::F32 => data.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                Precision::F64 => data.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
    });
    debug_assert_eq!(data.len(), model.parameter_count() * width);
    let manifest = Manifest {
        config: model.config().clone(),
        skeleton: model.skeleton().clone(),
        dtype: T::PRECISION,
        tensors,
    };
    let manifest = serde_json::to_vec(&manifest).expect("manifest serializes");

    let mut bytes = Vec::with_capacity(16 + manifest.len() + data.len() + DIGEST_LEN);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&manifest);
    bytes.extend_from_slice(&data);
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);

    // write-then-rename so an interrupted save never clobbers a good file
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a checkpoint, converting stored values to `T` if the file was
/// written at the other precision.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<PoseMamba<T>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 + DIGEST_LEN || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize
        .checked_add(mlen)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| bad("manifest length exceeds file"))?;
    let manifest: Manifest =
        serde_json::from_slice(&body[16..data_start]).map_err(|e| bad(format!("manifest: {e}")))?;
    let data = &body[data_start..];
    let width = manifest.dtype.bits() as usize / 8;

    let mut params = {
        // shapes come from the template; values are overwritten below
        let mut cfg = manifest.config.clone();
        cfg.validate()?;
        cfg.precision = T::PRECISION;
        super::ModelParams::<Tensor<T>>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0))
    };
    let mut entries = manifest.tensors.iter();
    let mut failure = None;
    params.visit_mut(&mut |name, t| {
        if failure.is_some() {
            return;
        }
        let Some(e) = entries.next() else {
            failure = Some(bad(format!("missing tensor {name}")));
            return;
        };
        if e.name != name || e.shape != t.shape() {
            failure = Some(bad(format!(
                "tensor {}{:?} does not match expected {name}{:?}",
                e.name,
                e.shape,
                t.shape()
            )));
            return;
        }
        let end = e.offset + t.len() * width;
        if end > data.len() {
            failure = Some(bad(format!("tensor {name} runs past the data section")));
            return;
        }
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            let at = e.offset + i * width;
            let x = match manifest.dtype {
                Precision::F32 => f32::from_le_bytes(data[at..at + 4].try_into().expect("4 bytes")) as f64,
                Precision::F64 => f64::from_le_bytes(data[at..at + 8].try_into().expect("8 bytes")),
            };
            *v = T::of(x);
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if entries.next().is_some() {
        return Err(bad("unexpected extra tensors"));
    }
    let mut config = manifest.config;
    config.precision = T::PRECISION;
    PoseMamba::new(config, manifest.skeleton, params)
}
