//! Single-file checkpoints: magic, version, JSON header, raw little-endian
//! tensor data. Tensor names follow the model manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CfbtError, Result};
use crate::model::CfbtModel;
use crate::nn::ParamStore;

const MAGIC: &[u8; 8] = b"CFBTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    bytes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Header {
    version: u32,
    step: usize,
    model_config: String,
    extra: BTreeMap<String, String>,
    tensors: Vec<TensorHeader>,
    sha256: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: usize,
    /// The model configuration in key-value form.
    pub model_config: String,
    /// Free-form metadata (training config, optimizer step, ...).
    pub extra: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(CfbtError::Data(format!("unsupported checkpoint dtype {other:?}"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(CfbtError::Data(format!("unsupported checkpoint dtype {other:?}"))),
    })
}

fn tensor_from_bytes(bytes: &[u8], dtype: &str, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let t = match dtype {
        "f32" if bytes.len() == 4 * n => {
            let v: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        "f64" if bytes.len() == 8 * n => {
            let v: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)?
        }
        _ => return Err(CfbtError::Data(format!("tensor record of {} bytes does not hold {n} {dtype}", bytes.len()))),
    };
    Ok(t)
}

impl Checkpoint {
    /// Snapshot of every model parameter.
    pub fn from_model(model: &CfbtModel, step: usize) -> Self {
        let tensors = model
            .store()
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.param.var().as_tensor().detach()))
            .collect();
        Self {
            step,
            model_config: crate::kv::KvConfig::to_kv_string(model.config()),
            extra: BTreeMap::new(),
            tensors,
        }
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut payload = Vec::new();
        let mut headers = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let bytes = tensor_bytes(t)?;
            headers.push(TensorHeader {
                name: name.clone(),
                shape: t.dims().to_vec(),
                dtype: dtype_name(t.dtype())?.to_string(),
                offset: payload.len(),
                bytes: bytes.len(),
            });
            payload.extend_from_slice(&bytes);
        }
        let header = Header {
            version: FORMAT_VERSION,
            step: self.step,
            model_config: self.model_config.clone(),
            extra: self.extra.clone(),
            tensors: headers,
            sha256: format!("{:x}", Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec(&header).map_err(|e| CfbtError::Data(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        let io = |e| CfbtError::io(&tmp, e);
        {
            let mut f = std::io::BufWriter::new(fs::File::create(&tmp).map_err(io)?);
            f.write_all(MAGIC).map_err(io)?;
            f.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
            f.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
            f.write_all(&json).map_err(io)?;
            f.write_all(&payload).map_err(io)?;
            f.flush().map_err(io)?;
        }
        fs::rename(&tmp, path).map_err(|e| CfbtError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let io = |e| CfbtError::io(path, e);
        let mut f = std::io::BufReader::new(fs::File::open(path).map_err(io)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(CfbtError::Data(format!("{}: not a checkpoint", path.display())));
        }
        let mut word = [0u8; 4];
        f.read_exact(&mut word).map_err(io)?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(CfbtError::Data(format!("{}: unsupported version {version}", path.display())));
        }
        let mut len = [0u8; 8];
        f.read_exact(&mut len).map_err(io)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        f.read_exact(&mut json).map_err(io)?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| CfbtError::Data(format!("{}: {e}", path.display())))?;
        let mut payload = Vec::new();
        f.read_to_end(&mut payload).map_err(io)?;
        if format!("{:x}", Sha256::digest(&payload)) != header.sha256 {
            return Err(CfbtError::Data(format!("{}: checksum mismatch", path.display())));
        }
        let mut tensors = BTreeMap::new();
        for t in &header.tensors {
            let bytes = payload
                .get(t.offset..t.offset + t.bytes)
                .ok_or_else(|| CfbtError::Data(format!("{}: truncated record {}", path.display(), t.name)))?;
            tensors.insert(t.name.clone(), tensor_from_bytes(bytes, &t.dtype, &t.shape)?);
        }
        Ok(Self {
            step: header.step,
            model_config: header.model_config,
            extra: header.extra,
            tensors,
        })
    }

    /// Copies matching tensors into the model. Every manifest entry must be
    /// present with the same shape.
    pub fn apply_to(&self, model: &CfbtModel) -> Result<()> {
        load_into_store(&self.tensors, model.store())
    }

    /// Rebuilds the stored configuration and loads the weights into it.
    pub fn model(&self, dtype: DType) -> Result<CfbtModel> {
        let mut cfg = crate::config::ModelConfig::desk();
        crate::kv::apply_all(&mut cfg, &crate::kv::parse_str(&self.model_config)?)?;
        cfg.validate()?;
        let model = CfbtModel::new(&cfg, dtype, None)?;
        self.apply_to(&model)?;
        Ok(model)
    }
}

/// Overwrites store parameters from `tensors` by name; shapes must match.
pub fn load_into_store(tensors: &BTreeMap<String, Tensor>, store: &ParamStore) -> Result<()> {
    for e in store.entries() {
        let t = tensors
            .get(&e.name)
            .ok_or_else(|| CfbtError::Data(format!("checkpoint lacks `{}`", e.name)))?;
        let var = e.param.var();
        if t.dims() != var.dims() {
            return Err(CfbtError::Data(format!(
                "`{}` has shape {:?} in the checkpoint but {:?} in the model",
                e.name,
                t.dims(),
                var.dims()
            )));
        }
        var.set(&t.to_dtype(var.dtype())?)?;
    }
    Ok(())
}

/// SHA-256 over names and raw values of the selected parameters.
pub fn param_hash(store: &ParamStore, select: impl Fn(&crate::nn::ParamEntry) -> bool) -> Result<String> {
    let mut h = Sha256::new();
    for e in store.entries().iter().filter(|e| select(e)) {
        h.update(e.name.as_bytes());
        h.update(tensor_bytes(e.param.var().as_tensor())?);
    }
    Ok(format!("{:x}", h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    #[test]
    fn round_trip_restores_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let a = CfbtModel::new(&ModelConfig::tiny(), DType::F32, Some(1)).unwrap();
        let mut ck = Checkpoint::from_model(&a, 7);
        ck.extra.insert("note".into(), "x".into());
        ck.save(&path).unwrap();
        assert!(!path.with_extension("tmp").exists());

        let b = CfbtModel::new(&ModelConfig::tiny(), DType::F32, Some(2)).unwrap();
        let all = |_: &crate::nn::ParamEntry| true;
        assert_ne!(param_hash(a.store(), all).unwrap(), param_hash(b.store(), all).unwrap());
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.step, 7);
        assert_eq!(loaded.extra["note"], "x");
        loaded.apply_to(&b).unwrap();
        assert_eq!(param_hash(a.store(), all).unwrap(), param_hash(b.store(), all).unwrap());
    }

    #[test]
    fn corrupted_and_mismatched_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let a = CfbtModel::new(&ModelConfig::tiny(), DType::F32, Some(1)).unwrap();
        Checkpoint::from_model(&a, 0).save(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(CfbtError::Data(_))));

        let mut cfg = ModelConfig::tiny();
        cfg.embed_dim = 16;
        cfg.ba_bottleneck = 4;
        let other = CfbtModel::new(&cfg, DType::F32, Some(1)).unwrap();
        assert!(Checkpoint::from_model(&a, 0).apply_to(&other).is_err());
        fs::write(&path, b"nope").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
