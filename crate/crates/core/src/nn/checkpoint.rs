//! `IMPD` checkpoint files: magic, `u32` version, `u32` header length, JSON
//! header, then every parameter as little-endian `f32` in declaration order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ImplicitModel, ModelConfig, ModelKind, RegressionModel};
use super::{Scalar, Trainable};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"IMPD";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub tensors: Vec<TensorInfo>,
    /// Free-form run metadata (training config, thresholds).
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// Either model kind, as loaded from disk.
#[derive(Clone, Debug)]
pub enum Checkpoint {
    Implicit(ImplicitModel<f32>, serde_json::Value),
    Regression(RegressionModel<f32>, serde_json::Value),
}

impl Checkpoint {
    pub fn metadata(&self) -> &serde_json::Value {
        match self {
            Checkpoint::Implicit(_, m) | Checkpoint::Regression(_, m) => m,
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Checkpoint::Implicit(..) => ModelKind::Implicit,
            Checkpoint::Regression(..) => ModelKind::Regression,
        }
    }
}

fn encode_model<S: Scalar>(
    kind: ModelKind,
    config: &ModelConfig,
    model: &impl Trainable<S>,
    metadata: &serde_json::Value,
) -> Vec<u8> {
    let params = model.params();
    let header = CheckpointHeader {
        kind,
        config: config.clone(),
        tensors: params
            .iter()
            .map(|p| TensorInfo {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + 4 * model.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in params {
        for v in &p.value {
            out.extend_from_slice(&v.to_f32().unwrap().to_le_bytes());
        }
    }
    out
}

pub fn encode_implicit(model: &ImplicitModel<f32>, metadata: &serde_json::Value) -> Vec<u8> {
    encode_model(ModelKind::Implicit, &model.config, model, metadata)
}

pub fn encode_regression(model: &RegressionModel<f32>, metadata: &serde_json::Value) -> Vec<u8> {
    encode_model(ModelKind::Regression, &model.config, model, metadata)
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

fn fill_params<S: Scalar>(
    model: &mut impl Trainable<S>,
    header: &CheckpointHeader,
    mut data: &[u8],
    path: &Path,
) -> Result<()> {
    let params = model.params_mut();
    if params.len() != header.tensors.len() {
        return Err(Error::format(path, "tensor count does not match architecture"));
    }
    for (p, info) in params.into_iter().zip(&header.tensors) {
        if p.name != info.name || p.shape != info.shape {
            return Err(Error::format(
                path,
                format!("tensor {} {:?} does not match {} {:?}", info.name, info.shape, p.name, p.shape),
            ));
        }
        let n = p.len() * 4;
        if data.len() < n {
            return Err(Error::format(path, format!("truncated data in {}", p.name)));
        }
        for (v, chunk) in p.value.iter_mut().zip(data[..n].chunks_exact(4)) {
            *v = S::lit(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        data = &data[n..];
    }
    if !data.is_empty() {
        return Err(Error::format(path, "trailing bytes after parameters"));
    }
    Ok(())
}

/// `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "not an IMPD checkpoint"));
    }
    let version = read_u32(bytes, 4, path)?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let len = read_u32(bytes, 8, path)? as usize;
    let json = bytes
        .get(12..12 + len)
        .ok_or_else(|| Error::format(path, "truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| Error::format(path, e.to_string()))?;
    let data = &bytes[12 + len..];
    let config = header.config.clone();
    config
        .validate()
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(match header.kind {
        ModelKind::Implicit => {
            let mut m = ImplicitModel::new(config, 0)?;
            fill_params(&mut m, &header, data, path)?;
            Checkpoint::Implicit(m, header.metadata)
        }
        ModelKind::Regression => {
            let mut m = RegressionModel::new(config, 0)?;
            fill_params(&mut m, &header, data, path)?;
            Checkpoint::Regression(m, header.metadata)
        }
    })
}

pub fn save(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn implicit_round_trip_is_exact() {
        let m = ImplicitModel::<f32>::new(ModelConfig::tiny(), 4).unwrap();
        let meta = serde_json::json!({"note": 1});
        let bytes = encode_implicit(&m, &meta);
        assert_eq!(&bytes[..4], b"IMPD");
        let Checkpoint::Implicit(back, meta_back) = decode(&bytes, Path::new("m.ckpt")).unwrap()
        else {
            panic!("wrong kind")
        };
        assert_eq!(meta_back, meta);
        for (a, b) in m.params().iter().zip(back.params()) {
            assert_eq!(a.value, b.value);
        }
        assert_eq!(encode_implicit(&back, &meta), bytes);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let m = RegressionModel::<f32>::new(ModelConfig::tiny(), 4).unwrap();
        let bytes = encode_regression(&m, &serde_json::Value::Null);
        let err = decode(&bytes[..bytes.len() - 3], Path::new("r.ckpt")).unwrap_err();
        assert!(err.to_string().contains("r.ckpt"));
        assert!(decode(b"NOPE", Path::new("x")).is_err());
    }
}
