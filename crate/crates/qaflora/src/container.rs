//! Single-blob tensor container with a JSON manifest.
//!
//! File layout: an 8-byte little-endian manifest length, the manifest JSON,
//! then the blob of little-endian f32 values, row-major, concatenated in
//! manifest order. Offsets are relative to the blob start. The same layout
//! backs model (`.lmt`) and adapter (`.lat`) files; external converters can
//! target it by emitting the documented tensor names.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{LoraAdapter, LoraLayer};
use crate::error::{Error, Result};
use crate::model::{BaseModel, BlockWeights, ModelConfig, PositionEncoding, Projection, Tensor32};

pub const FORMAT_VERSION: u32 = 1;

/// One named tensor with its decoded values.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let elements: usize = shape.iter().product();
        if elements != data.len() {
            return Err(Error::Format {
                field: "shape",
                message: format!(
                    "{name}: shape {shape:?} holds {elements} elements, data has {}",
                    data.len()
                ),
            });
        }
        Ok(TensorRecord { name, shape, data })
    }
}

/// Adapter layer description carried in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterLayerInfo {
    pub target: String,
    pub rank: usize,
    pub scale: f64,
}

/// Adapter metadata block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterInfo {
    pub id: String,
    pub layers: Vec<AdapterLayerInfo>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

/// Decoded container: manifest metadata plus tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorContainer {
    pub kind: String,
    pub model: Option<ModelConfig>,
    pub adapter: Option<AdapterInfo>,
    pub tensors: Vec<TensorRecord>,
}

#[derive(Serialize, Deserialize)]
struct ManifestTensor {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    byte_offset: u64,
    byte_length: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adapter: Option<AdapterInfo>,
    tensors: Vec<ManifestTensor>,
}

/// Serialize a container to `path`.
pub fn write_container(path: &Path, container: &TensorContainer) -> Result<()> {
    let mut entries = Vec::with_capacity(container.tensors.len());
    let mut offset = 0u64;
    for t in &container.tensors {
        let elements: usize = t.shape.iter().product();
        if elements != t.data.len() {
            return Err(Error::Format {
                field: "shape",
                message: format!("{}: element count mismatch", t.name),
            });
        }
        let byte_length = (t.data.len() * 4) as u64;
        entries.push(ManifestTensor {
            name: t.name.clone(),
            dtype: "f32".to_string(),
            shape: t.shape.clone(),
            byte_offset: offset,
            byte_length,
        });
        offset += byte_length;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: container.kind.clone(),
        model: container.model.clone(),
        adapter: container.adapter.clone(),
        tensors: entries,
    };
    let manifest_bytes = serde_json::to_vec(&manifest).map_err(|e| Error::Format {
        field: "manifest",
        message: e.to_string(),
    })?;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, &e))?;
    file.write_all(&(manifest_bytes.len() as u64).to_le_bytes())
        .map_err(|e| Error::io(path, &e))?;
    file.write_all(&manifest_bytes)
        .map_err(|e| Error::io(path, &e))?;
    let mut blob = Vec::with_capacity(offset as usize);
    for t in &container.tensors {
        for v in &t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    file.write_all(&blob).map_err(|e| Error::io(path, &e))?;
    Ok(())
}

/// Read and validate a container from `path`.
pub fn read_container(path: &Path) -> Result<TensorContainer> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, &e))?;
    let mut header = [0u8; 8];
    file.read_exact(&mut header).map_err(|e| Error::io(path, &e))?;
    let manifest_len = u64::from_le_bytes(header) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    file.read_exact(&mut manifest_bytes)
        .map_err(|_| Error::Format {
            field: "manifest",
            message: "file shorter than declared manifest length".to_string(),
        })?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes).map_err(|e| Error::Format {
        field: "manifest",
        message: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format {
            field: "format_version",
            message: format!("expected {FORMAT_VERSION}, got {}", manifest.format_version),
        });
    }
    let mut blob = Vec::new();
    file.read_to_end(&mut blob).map_err(|e| Error::io(path, &e))?;

    let mut expected_offset = 0u64;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        if entry.dtype != "f32" {
            return Err(Error::Format {
                field: "dtype",
                message: format!("{}: unsupported dtype {}", entry.name, entry.dtype),
            });
        }
        let elements: u64 = entry.shape.iter().map(|&d| d as u64).product();
        if elements * 4 != entry.byte_length {
            return Err(Error::Format {
                field: "byte_length",
                message: format!(
                    "{}: shape {:?} needs {} bytes, manifest says {}",
                    entry.name,
                    entry.shape,
                    elements * 4,
                    entry.byte_length
                ),
            });
        }
        if entry.byte_offset != expected_offset {
            return Err(Error::Format {
                field: "byte_offset",
                message: format!(
                    "{}: offsets must be contiguous and non-overlapping; expected {expected_offset}, got {}",
                    entry.name, entry.byte_offset
                ),
            });
        }
        let end = entry.byte_offset + entry.byte_length;
        if end > blob.len() as u64 {
            return Err(Error::Format {
                field: "byte_length",
                message: format!(
                    "{}: tensor extends to byte {end} but blob holds {}",
                    entry.name,
                    blob.len()
                ),
            });
        }
        let start = entry.byte_offset as usize;
        let data: Vec<f32> = blob[start..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(TensorRecord {
            name: entry.name.clone(),
            shape: entry.shape.clone(),
            data,
        });
        expected_offset = end;
    }
    if expected_offset != blob.len() as u64 {
        return Err(Error::Format {
            field: "blob",
            message: format!(
                "blob holds {} bytes but tensors end at {expected_offset}",
                blob.len()
            ),
        });
    }
    Ok(TensorContainer {
        kind: manifest.kind,
        model: manifest.model,
        adapter: manifest.adapter,
        tensors,
    })
}

fn tensor32_record(name: String, t: &Tensor32) -> TensorRecord {
    TensorRecord {
        name,
        shape: vec![t.rows(), t.cols()],
        data: t.as_slice().to_vec(),
    }
}

fn gains_record(name: String, g: &[f32]) -> TensorRecord {
    TensorRecord {
        name,
        shape: vec![g.len()],
        data: g.to_vec(),
    }
}

/// Write a model container (`.lmt`).
pub fn save_model(path: &Path, model: &BaseModel) -> Result<()> {
    let mut tensors = Vec::new();
    tensors.push(tensor32_record("embedding".to_string(), model.embedding()));
    if let Some(pe) = model.pos_embedding() {
        tensors.push(tensor32_record("pos_embedding".to_string(), pe));
    }
    for (l, block) in model.blocks().iter().enumerate() {
        tensors.push(gains_record(format!("block{l}.attn_norm"), &block.attn_norm));
        for proj in Projection::ALL {
            tensors.push(tensor32_record(
                crate::model::target_name(l, proj),
                block.projection(proj),
            ));
        }
        tensors.push(gains_record(format!("block{l}.ffn_norm"), &block.ffn_norm));
    }
    tensors.push(gains_record("final_norm".to_string(), model.final_norm()));
    tensors.push(tensor32_record("lm_head".to_string(), model.lm_head()));
    write_container(
        path,
        &TensorContainer {
            kind: "model".to_string(),
            model: Some(model.config().clone()),
            adapter: None,
            tensors,
        },
    )
}

fn take_tensor(
    tensors: &mut BTreeMap<String, TensorRecord>,
    name: &str,
    rows: usize,
    cols: usize,
) -> Result<Tensor32> {
    let record = tensors.remove(name).ok_or_else(|| Error::Format {
        field: "tensors",
        message: format!("missing tensor {name}"),
    })?;
    if record.shape != [rows, cols] {
        return Err(Error::Format {
            field: "shape",
            message: format!("{name}: expected [{rows}, {cols}], got {:?}", record.shape),
        });
    }
    Tensor32::new(rows, cols, record.data)
}

fn take_gains(tensors: &mut BTreeMap<String, TensorRecord>, name: &str, len: usize) -> Result<Vec<f32>> {
    let record = tensors.remove(name).ok_or_else(|| Error::Format {
        field: "tensors",
        message: format!("missing tensor {name}"),
    })?;
    if record.shape != [len] {
        return Err(Error::Format {
            field: "shape",
            message: format!("{name}: expected [{len}], got {:?}", record.shape),
        });
    }
    Ok(record.data)
}

/// Load a model container (`.lmt`).
pub fn load_model(path: &Path) -> Result<BaseModel> {
    let container = read_container(path)?;
    if container.kind != "model" {
        return Err(Error::Format {
            field: "kind",
            message: format!("expected model container, got {}", container.kind),
        });
    }
    let config = container.model.clone().ok_or_else(|| Error::Format {
        field: "model",
        message: "model metadata block missing".to_string(),
    })?;
    let mut by_name: BTreeMap<String, TensorRecord> = container
        .tensors
        .into_iter()
        .map(|t| (t.name.clone(), t))
        .collect();
    let d = config.d_model;
    let embedding = take_tensor(&mut by_name, "embedding", config.vocab_size, d)?;
    let pos_embedding = match config.positions {
        PositionEncoding::Learned => Some(take_tensor(
            &mut by_name,
            "pos_embedding",
            config.max_seq_len,
            d,
        )?),
        PositionEncoding::Rope => None,
    };
    let mut blocks = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let attn_norm = take_gains(&mut by_name, &format!("block{l}.attn_norm"), d)?;
        let ffn_norm = take_gains(&mut by_name, &format!("block{l}.ffn_norm"), d)?;
        let mut projection = |proj: Projection| -> Result<Tensor32> {
            let (rows, cols) = proj.shape(&config);
            take_tensor(&mut by_name, &crate::model::target_name(l, proj), rows, cols)
        };
        blocks.push(BlockWeights {
            attn_norm,
            attn_q: projection(Projection::AttnQ)?,
            attn_k: projection(Projection::AttnK)?,
            attn_v: projection(Projection::AttnV)?,
            attn_o: projection(Projection::AttnO)?,
            ffn_norm,
            ffn_gate: projection(Projection::FfnGate)?,
            ffn_up: projection(Projection::FfnUp)?,
            ffn_down: projection(Projection::FfnDown)?,
        });
    }
    let final_norm = take_gains(&mut by_name, "final_norm", d)?;
    let lm_head = take_tensor(&mut by_name, "lm_head", config.vocab_size, d)?;
    BaseModel::new(config, embedding, pos_embedding, blocks, final_norm, lm_head)
}

/// Write an adapter container (`.lat`).
pub fn save_adapter(path: &Path, adapter: &LoraAdapter) -> Result<()> {
    let mut layers = Vec::with_capacity(adapter.layers().len());
    let mut tensors = Vec::with_capacity(adapter.layers().len() * 2);
    for layer in adapter.layers() {
        layers.push(AdapterLayerInfo {
            target: layer.target().to_string(),
            rank: layer.rank(),
            scale: layer.scale(),
        });
        tensors.push(tensor32_record(format!("{}.a", layer.target()), layer.a_factor()));
        tensors.push(tensor32_record(format!("{}.b", layer.target()), layer.b_factor()));
    }
    write_container(
        path,
        &TensorContainer {
            kind: "adapter".to_string(),
            model: None,
            adapter: Some(AdapterInfo {
                id: adapter.id().to_string(),
                layers,
                metadata: adapter.metadata().clone(),
            }),
            tensors,
        },
    )
}

/// Load an adapter container (`.lat`).
pub fn load_adapter(path: &Path) -> Result<LoraAdapter> {
    let container = read_container(path)?;
    if container.kind != "adapter" {
        return Err(Error::Format {
            field: "kind",
            message: format!("expected adapter container, got {}", container.kind),
        });
    }
    let info = container.adapter.ok_or_else(|| Error::Format {
        field: "adapter",
        message: "adapter metadata block missing".to_string(),
    })?;
    let mut by_name: BTreeMap<String, TensorRecord> = container
        .tensors
        .into_iter()
        .map(|t| (t.name.clone(), t))
        .collect();
    let mut layers = Vec::with_capacity(info.layers.len());
    for meta in &info.layers {
        let a = by_name.remove(&format!("{}.a", meta.target)).ok_or_else(|| Error::Format {
            field: "tensors",
            message: format!("missing tensor {}.a", meta.target),
        })?;
        let b = by_name.remove(&format!("{}.b", meta.target)).ok_or_else(|| Error::Format {
            field: "tensors",
            message: format!("missing tensor {}.b", meta.target),
        })?;
        if a.shape.len() != 2 || a.shape[0] != meta.rank {
            return Err(Error::Format {
                field: "shape",
                message: format!("{}.a: expected [{}, d_in], got {:?}", meta.target, meta.rank, a.shape),
            });
        }
        if b.shape.len() != 2 || b.shape[1] != meta.rank {
            return Err(Error::Format {
                field: "shape",
                message: format!("{}.b: expected [d_out, {}], got {:?}", meta.target, meta.rank, b.shape),
            });
        }
        if a.data.iter().chain(b.data.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Format {
                field: "tensors",
                message: format!("{}: non-finite factor entries", meta.target),
            });
        }
        let a_t = Tensor32::new(a.shape[0], a.shape[1], a.data)?;
        let b_t = Tensor32::new(b.shape[0], b.shape[1], b.data)?;
        layers.push(LoraLayer::new(meta.target.clone(), a_t, b_t, meta.scale)?);
    }
    LoraAdapter::new(info.id, layers, info.metadata)
}
