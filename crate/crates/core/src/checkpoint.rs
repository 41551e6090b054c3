//! Model checkpoints: a safetensors file whose header metadata carries a
//! single `pbnet` entry with the JSON-encoded [`CheckpointMeta`].
//!
//! Tensors are written in name order and the metadata has one key, so equal
//! weights and metadata always serialize to identical bytes.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::network::{ModelConfig, PBNet};

pub const SCHEMA_VERSION: u32 = 1;
pub const METADATA_KEY: &str = "pbnet";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub model: ModelConfig,
    /// Full resolved run configuration, if the checkpoint came from training.
    #[serde(default)]
    pub config: serde_json::Value,
    pub fold: Option<usize>,
    pub epoch: usize,
    pub step: u64,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    /// Input standardization the weights were trained with.
    #[serde(default)]
    pub normalization: Option<Normalization>,
}

impl CheckpointMeta {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model,
            config: serde_json::Value::Null,
            fold: None,
            epoch: 0,
            step: 0,
            metrics: BTreeMap::new(),
            normalization: None,
        }
    }
}

/// Serialize every variable (trainable and buffers) of `net`.
pub fn to_bytes(net: &PBNet, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let tensors: Vec<(String, Tensor)> = net
        .store()
        .all()
        .into_iter()
        .map(|(name, var, _)| (name, var.as_tensor().clone()))
        .collect();
    let mut info = HashMap::new();
    info.insert(METADATA_KEY.to_string(), serde_json::to_string(meta)?);
    safetensors::serialize(tensors, Some(info)).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save(net: &PBNet, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, to_bytes(net, meta)?).map_err(|e| Error::io(path, e))
}

pub fn read_meta(bytes: &[u8]) -> Result<CheckpointMeta> {
    let (_, header) = safetensors::SafeTensors::read_metadata(bytes)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(METADATA_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("no `{METADATA_KEY}` metadata entry")))?;
    let meta: CheckpointMeta = serde_json::from_str(json)?;
    if meta.schema_version > SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint schema {} is newer than supported {SCHEMA_VERSION}",
            meta.schema_version
        )));
    }
    Ok(meta)
}

/// Rebuild the model described by the metadata and load its weights.
pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<(PBNet, CheckpointMeta)> {
    let meta = read_meta(bytes)?;
    let tensors: BTreeMap<String, Tensor> = candle_core::safetensors::load_buffer(bytes, device)
        .map_err(|e| Error::Checkpoint(e.to_string()))?
        .into_iter()
        .collect();
    let dtype = tensors.values().next().map(|t| t.dtype()).unwrap_or(DType::F32);
    let mut model = meta.model.clone();
    model.backbone.pretrained = false;
    model.backbone.weights = None;
    let net = PBNet::new(model, 0, dtype, device.clone())?;
    let expected = net.store().all().len();
    if tensors.len() != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model has {expected}",
            tensors.len()
        )));
    }
    net.store().load_from(&tensors, "")?;
    Ok((net, meta))
}

pub fn load(path: &Path, device: &Device) -> Result<(PBNet, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, device).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, BackboneVariant};
    use crate::network::build_cpu;
    use crate::nn::Ctx;

    fn cfg() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                variant: BackboneVariant::TinyTest,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let net = build_cpu(cfg(), 4).unwrap();
        let x = Tensor::rand(0f32, 1.0, (1, 3, 64, 64), &Device::Cpu).unwrap();
        // one training forward moves the running statistics away from init
        net.forward(&Ctx::train(), &x).unwrap();
        let before = net.forward(&Ctx::eval(), &x).unwrap().p0;
        let mut meta = CheckpointMeta::new(cfg());
        meta.fold = Some(2);
        meta.metrics.insert("dice".into(), 0.5);
        let bytes = to_bytes(&net, &meta).unwrap();
        let (loaded, m2) = from_bytes(&bytes, &Device::Cpu).unwrap();
        assert_eq!(m2, meta);
        let after = loaded.forward(&Ctx::eval(), &x).unwrap().p0;
        let v = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v(&before), v(&after));
        assert_eq!(to_bytes(&loaded, &meta).unwrap(), bytes);
    }

    #[test]
    fn rejects_foreign_files() {
        let t = Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap();
        let bytes = safetensors::serialize([("w", t)], None).unwrap();
        assert!(matches!(from_bytes(&bytes, &Device::Cpu), Err(Error::Checkpoint(_))));
        assert!(matches!(from_bytes(b"junk", &Device::Cpu), Err(Error::Checkpoint(_))));
    }
}
