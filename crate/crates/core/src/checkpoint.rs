//! Single-file checkpoints: a safetensors archive whose header metadata
//! carries the model config and vocabulary. Tensors are stored in their
//! native dtype, so a save/load cycle is bit-exact.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::model::{GroundingModel, ModelConfig};
use crate::vocab::Vocabulary;

const FORMAT: &str = "report-grounding/1";

fn st_dtype(d: DType) -> Result<Dtype> {
    match d {
        DType::F32 => Ok(Dtype::F32),
        DType::F64 => Ok(Dtype::F64),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

/// Parameter snapshot detached from the live model.
pub type Snapshot = BTreeMap<String, Tensor>;

pub fn snapshot(model: &GroundingModel) -> Result<Snapshot> {
    model
        .vars()
        .into_iter()
        .map(|(name, var)| Ok((name, var.as_tensor().copy()?.detach())))
        .collect()
}

pub fn restore(model: &GroundingModel, snap: &Snapshot) -> Result<()> {
    for store in model.stores() {
        store.load(snap)?;
    }
    Ok(())
}

pub fn save_snapshot(config: &ModelConfig, vocab: &Vocabulary, snap: &Snapshot, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let dtype = st_dtype(config.dtype)?;
    let mut buffers = Vec::with_capacity(snap.len());
    for (name, t) in snap {
        buffers.push((name.clone(), t.dims().to_vec(), tensor_bytes(&t.to_dtype(config.dtype)?)?));
    }
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(dtype, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT.to_string());
    meta.insert("config".to_string(), serde_json::to_string(config).expect("config serializes"));
    meta.insert("vocab".to_string(), serde_json::to_string(vocab).expect("vocab serializes"));
    let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save(model: &GroundingModel, path: impl AsRef<Path>) -> Result<()> {
    save_snapshot(model.config(), model.vocab(), &snapshot(model)?, path)
}

pub fn load(path: impl AsRef<Path>) -> Result<GroundingModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let meta = header.metadata().clone().ok_or_else(|| bad("missing metadata".into()))?;
    if meta.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(bad("unrecognized format".into()));
    }
    let field = |k: &str| meta.get(k).ok_or_else(|| bad(format!("missing {k}")));
    let config: ModelConfig = serde_json::from_str(field("config")?).map_err(|e| bad(e.to_string()))?;
    let vocab: Vocabulary = serde_json::from_str(field("vocab")?).map_err(|e| bad(e.to_string()))?;
    let model = GroundingModel::new(config, vocab)?;

    let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
    let mut snap = Snapshot::new();
    for (name, view) in st.tensors() {
        let shape = view.shape().to_vec();
        let data = view.data();
        let t = match view.dtype() {
            Dtype::F32 => {
                let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, shape, &Device::Cpu)?
            }
            Dtype::F64 => {
                let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, shape, &Device::Cpu)?
            }
            other => return Err(bad(format!("unsupported dtype {other:?}"))),
        };
        snap.insert(name, t);
    }
    restore(&model, &snap)?;
    Ok(model)
}
