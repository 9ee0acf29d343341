use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::cvt::{Cvt, CvtConfig};
use crate::error::io_err;
use crate::layers::ParamStore;
use crate::unet::{Unet, UnetConfig};
use crate::{NnError, Result};

pub const CHECKPOINT_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Cvt,
    Unet,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Cvt => "cvt",
            ModelKind::Unet => "unet",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = NnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cvt" => Ok(ModelKind::Cvt),
            "unet" => Ok(ModelKind::Unet),
            _ => Err(NnError::Config(format!("unknown model '{s}' (cvt|unet)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum ModelConfig {
    Cvt(CvtConfig),
    Unet(UnetConfig),
}

impl ModelConfig {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::Cvt(_) => ModelKind::Cvt,
            ModelConfig::Unet(_) => ModelKind::Unet,
        }
    }

    pub fn n_views(&self) -> usize {
        match self {
            ModelConfig::Cvt(c) => c.n_views,
            ModelConfig::Unet(c) => c.n_views,
        }
    }
}

pub enum BevModel {
    Cvt(Cvt),
    Unet(Unet),
}

impl BevModel {
    pub fn new(config: &ModelConfig, seed: u64, device: &Device) -> Result<Self> {
        Ok(match config {
            ModelConfig::Cvt(c) => BevModel::Cvt(Cvt::new(c, seed, device)?),
            ModelConfig::Unet(c) => BevModel::Unet(Unet::new(c, seed, device)?),
        })
    }

    /// BEV logits `(B, 3, Hg, Wg)`.
    pub fn forward(&self, batch: &Batch) -> Result<Tensor> {
        match self {
            BevModel::Cvt(m) => m.forward(batch),
            BevModel::Unet(m) => m.forward(batch),
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            BevModel::Cvt(m) => m.params(),
            BevModel::Unet(m) => m.params(),
        }
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            BevModel::Cvt(m) => ModelConfig::Cvt(m.config().clone()),
            BevModel::Unet(m) => ModelConfig::Unet(m.config().clone()),
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.config().kind()
    }

    /// Single safetensors file; the header metadata carries the format
    /// version, the architecture tag and the full model config as JSON.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with(path, &[])
    }

    /// Like [`BevModel::save`], with extra string metadata entries.
    pub fn save_with(&self, path: &Path, extra: &[(&str, String)]) -> Result<()> {
        let ckpt_err = |reason: String| NnError::Checkpoint { path: path.display().to_string(), reason };
        let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (name, var) in self.params().named() {
            let data = var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            let bytes = data.iter().flat_map(|v| v.to_le_bytes()).collect();
            buffers.push((name.clone(), var.dims().to_vec(), bytes));
        }
        let views = buffers
            .iter()
            .map(|(n, shape, bytes)| Ok((n.clone(), TensorView::new(Dtype::F32, shape.clone(), bytes).map_err(|e| ckpt_err(e.to_string()))?)))
            .collect::<Result<Vec<_>>>()?;
        let config = self.config();
        let mut metadata: HashMap<String, String> = extra.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        metadata.insert("format_version".into(), CHECKPOINT_VERSION.into());
        metadata.insert("arch".into(), config.kind().to_string());
        metadata.insert("config".into(), serde_json::to_string(&config)?);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        safetensors::serialize_to_file(views, Some(metadata), path).map_err(|e| ckpt_err(e.to_string()))
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        Ok(Self::load_with_metadata(path, device)?.0)
    }

    /// The model and the checkpoint's header metadata.
    pub fn load_with_metadata(path: &Path, device: &Device) -> Result<(Self, HashMap<String, String>)> {
        let ckpt_err = |reason: String| NnError::Checkpoint { path: path.display().to_string(), reason };
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(e.to_string()))?;
        let meta = header.metadata().clone().ok_or_else(|| ckpt_err("missing metadata".into()))?;
        let version = meta.get("format_version").ok_or_else(|| ckpt_err("missing format_version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(ckpt_err(format!("unsupported format version {version}")));
        }
        let config: ModelConfig =
            serde_json::from_str(meta.get("config").ok_or_else(|| ckpt_err("missing config".into()))?)?;
        if meta.get("arch").map(String::as_str) != Some(&config.kind().to_string()) {
            return Err(ckpt_err(format!("architecture tag {:?} does not match config", meta.get("arch"))));
        }
        let model = Self::new(&config, 0, device)?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| ckpt_err(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(ckpt_err(format!("tensor {name} has dtype {:?}", view.dtype())));
            }
            let data: Vec<f32> = view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.insert(name, Tensor::from_vec(data, view.shape(), device)?);
        }
        model.params().assign(&tensors).map_err(ckpt_err)?;
        Ok((model, meta))
    }
}
