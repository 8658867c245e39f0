//! Checkpoint files: magic, a little-endian u64 header length, a JSON header
//! (config, class names and tensor manifest), then raw little-endian tensor
//! bytes in manifest order.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig};

const MAGIC: &[u8; 8] = b"LSMCKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    class_names: Vec<String>,
    epoch: Option<usize>,
    tensors: Vec<TensorEntry>,
}

/// Metadata stored next to the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub class_names: Vec<String>,
    pub epoch: Option<usize>,
}

fn dtype_name(dt: DType) -> Result<&'static str> {
    match dt {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Format(format!("cannot checkpoint dtype {other:?}"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::Format(format!("cannot checkpoint dtype {other:?}"))),
    })
}

/// Serialises every parameter and buffer of `model` to bytes.
pub fn to_bytes(model: &Model, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut data = Vec::new();
    let mut tensors = Vec::new();
    for e in model.store().entries() {
        let t = e.var.as_tensor();
        let bytes = tensor_bytes(t)?;
        tensors.push(TensorEntry {
            name: e.name.clone(),
            shape: t.dims().to_vec(),
            dtype: dtype_name(t.dtype())?.to_string(),
            offset: data.len(),
            len: bytes.len(),
        });
        data.extend_from_slice(&bytes);
    }
    let header = Header {
        version: VERSION,
        model: model.config().clone(),
        class_names: meta.class_names.clone(),
        epoch: meta.epoch,
        tensors,
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + header.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    Ok(out)
}

/// Writes atomically (temporary file then rename).
pub fn save(model: &Model, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = to_bytes(model, meta)?;
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, CheckpointMeta)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing checkpoint magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if hlen > body.len() {
        return Err(corrupt(format!("header length {hlen} exceeds file size")));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])
        .map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    if header.version != VERSION {
        return Err(corrupt(format!("unsupported version {}", header.version)));
    }
    let data = &body[hlen..];
    let dtype = match header.tensors.first().map(|t| t.dtype.as_str()) {
        Some("f64") => DType::F64,
        _ => DType::F32,
    };
    let model = Model::build(&header.model, 0, dtype)
        .map_err(|e| corrupt(format!("invalid model config: {e}")))?;
    let entries = model.store().entries();
    if entries.len() != header.tensors.len() {
        return Err(corrupt(format!(
            "expected {} tensors, found {}",
            entries.len(),
            header.tensors.len()
        )));
    }
    for t in &header.tensors {
        let end = t.offset.checked_add(t.len).ok_or_else(|| corrupt("offset overflow"))?;
        if end > data.len() {
            return Err(corrupt(format!("tensor {} truncated", t.name)));
        }
        let raw = &data[t.offset..end];
        let n: usize = t.shape.iter().product();
        let tensor = match t.dtype.as_str() {
            "f32" if raw.len() == 4 * n => {
                let v: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Tensor::from_vec(v, t.shape.as_slice(), &Device::Cpu)?
            }
            "f64" if raw.len() == 8 * n => {
                let v: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Tensor::from_vec(v, t.shape.as_slice(), &Device::Cpu)?
            }
            other => {
                return Err(corrupt(format!(
                    "tensor {} has dtype {other} and {} bytes for {n} elements",
                    t.name,
                    raw.len()
                )))
            }
        };
        model
            .store()
            .set(&t.name, &tensor.to_dtype(dtype)?)
            .map_err(|e| corrupt(format!("tensor {}: {e}", t.name)))?;
    }
    Ok((
        model,
        CheckpointMeta {
            class_names: header.class_names,
            epoch: header.epoch,
        },
    ))
}

pub fn load(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_size: 64,
            stem_width: 8,
            stage_widths: [16, 16, 32, 32],
            stage_depths: [1, 1, 1, 1],
            neck_widths: [16, 16, 32, 32],
            head_box_width: 16,
            head_cls_width: 16,
            ..ModelConfig::default()
        }
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            class_names: vec!["a".into(), "b".into(), "c".into()],
            epoch: Some(3),
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = Model::build(&tiny(), 11, DType::F32).unwrap();
        let bytes = to_bytes(&m, &meta()).unwrap();
        let (back, meta_back) = from_bytes(&bytes).unwrap();
        assert_eq!(meta_back, meta());
        assert_eq!(to_bytes(&back, &meta()).unwrap(), bytes);
    }

    #[test]
    fn truncation_is_reported() {
        let m = Model::build(&tiny(), 1, DType::F32).unwrap();
        let bytes = to_bytes(&m, &meta()).unwrap();
        for cut in [4, 20, bytes.len() - 3] {
            let err = from_bytes(&bytes[..cut]).err().expect("must fail");
            assert_eq!(err.kind(), "corrupt-checkpoint", "cut at {cut}");
        }
    }
}
