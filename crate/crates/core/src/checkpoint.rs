//! Single-file weight checkpoints.
//!
//! Layout: the 8-byte magic `PHISEGCK`, a little-endian `u32` format
//! version, a `u64` header length, a JSON header (model config, dtype,
//! tensor table, metadata), then every tensor's values in little-endian
//! order as listed in the table.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio::{self, Cursor};
use crate::model::{build_model, ModelConfig, NetworkWeights};
use crate::params::ParamStore;
use crate::tensor::{DType, Scalar, Shape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PHISEGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Bookkeeping stored next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Optimizer steps taken when the weights were saved.
    pub step: usize,
    /// Validation total loss at save time.
    pub val_loss: f64,
    /// Echo of the training configuration, if any.
    #[serde(default)]
    pub train_config: Option<serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub weights: NetworkWeights<T>,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 4],
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_config: ModelConfig,
    dtype: DType,
    tensors: Vec<TensorEntry>,
    meta: CheckpointMeta,
}

pub fn encode_checkpoint<T: Scalar>(weights: &NetworkWeights<T>, meta: &CheckpointMeta) -> Vec<u8> {
    let store = weights.store();
    let header = Header {
        model_config: weights.config().clone(),
        dtype: T::DTYPE,
        tensors: store
            .shapes()
            .into_iter()
            .map(|(name, s, trainable)| TensorEntry {
                name,
                shape: [s.n, s.c, s.h, s.w],
                trainable,
            })
            .collect(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(json.len() + 20 + store.len() * 64);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for id in store.ids() {
        out.extend_from_slice(&T::to_le_bytes_vec(store.get(id).data()));
    }
    out
}

pub fn save_checkpoint<T: Scalar>(path: &Path, weights: &NetworkWeights<T>, meta: &CheckpointMeta) -> Result<()> {
    fsio::write_atomic(path, &encode_checkpoint(weights, meta))
}

/// Reads a checkpoint. With `expected` set, a different model config is a
/// [`Error::DimensionMismatch`].
pub fn load_checkpoint<T: Scalar>(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint<T>> {
    let bytes = fsio::read(path)?;
    decode_checkpoint(path, &bytes, expected)
}

pub fn decode_checkpoint<T: Scalar>(path: &Path, bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint<T>> {
    let mut cur = Cursor::new(path, bytes);
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let len = usize::try_from(cur.u64()?).map_err(|_| Error::format(path, "header too large"))?;
    let header: Header =
        serde_json::from_slice(cur.take(len)?).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    if let Some(exp) = expected {
        if *exp != header.model_config {
            return Err(Error::DimensionMismatch(format!(
                "checkpoint {} was trained with a different model config",
                path.display()
            )));
        }
    }
    header
        .model_config
        .validate()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let width = header.dtype.size_in_bytes();
    let mut store = ParamStore::<T>::new();
    for entry in &header.tensors {
        let [n, c, h, w] = entry.shape;
        let shape = Shape::new(n, c, h, w);
        let raw = cur.take(shape.numel() * width)?;
        let values: Vec<T> = match header.dtype {
            DType::F32 => raw.chunks_exact(4).map(|b| T::lit(f32::from_le_chunk(b) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|b| T::lit(f64::from_le_chunk(b))).collect(),
        };
        let t = Tensor::from_vec(shape, values);
        if entry.trainable {
            store.add_param(entry.name.clone(), t);
        } else {
            store.add_buffer(entry.name.clone(), t);
        }
    }
    cur.expect_end()?;
    // Rebuild the layer layout from the config, then swap in the stored values.
    let weights = build_model::<T>(&header.model_config, 0)?
        .with_store(store)
        .map_err(|_| Error::format(path, "tensor table does not match the model config"))?;
    Ok(Checkpoint {
        weights,
        meta: header.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            step: 7,
            val_loss: 0.25,
            train_config: None,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let w = build_model::<f32>(&ModelConfig::phiseg(2, 3, 16, 16, 2), 9).unwrap();
        let bytes = encode_checkpoint(&w, &meta());
        let back: Checkpoint<f32> = decode_checkpoint(Path::new("mem"), &bytes, Some(w.config())).unwrap();
        assert_eq!(back.weights.checksum(), w.checksum());
        assert_eq!(back.meta, meta());
    }

    #[test]
    fn mismatched_config_is_a_dimension_error() {
        let w = build_model::<f32>(&ModelConfig::phiseg(2, 3, 16, 16, 2), 9).unwrap();
        let bytes = encode_checkpoint(&w, &meta());
        let other = ModelConfig::phiseg(1, 3, 16, 16, 2);
        let err = decode_checkpoint::<f32>(Path::new("mem"), &bytes, Some(&other)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
    }

    #[test]
    fn truncation_is_a_format_error() {
        let w = build_model::<f64>(&ModelConfig::deterministic(2, 8, 8, 2), 1).unwrap();
        let bytes = encode_checkpoint(&w, &meta());
        let err = decode_checkpoint::<f64>(Path::new("mem"), &bytes[..bytes.len() - 3], None).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }
}
