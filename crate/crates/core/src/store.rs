//! Binary container: a one-line JSON manifest, a `\n`, then a little-endian
//! `f64` blob. Models and adversarial sets share the layout.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerSpec, Model, Params};
use crate::tensor::Tensor;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Where an artifact came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub base_seed: u64,
    pub tool_version: String,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, base_seed: u64) -> Self {
        Self { config_hash: config_hash.into(), base_seed, tool_version: TOOL_VERSION.to_string() }
    }
}

/// A tensor's location inside the blob, in `f64` elements.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

pub fn write_container<M: Serialize>(manifest: &M, blob: &[f64]) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec(manifest)?;
    out.push(b'\n');
    out.reserve(blob.len() * 8);
    for v in blob {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn read_container<M: DeserializeOwned>(bytes: &[u8]) -> Result<(M, Vec<f64>)> {
    let split =
        bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Container("missing manifest terminator".into()))?;
    let manifest =
        serde_json::from_slice(&bytes[..split]).map_err(|e| Error::Container(format!("bad manifest: {e}")))?;
    let blob = &bytes[split + 1..];
    if !blob.len().is_multiple_of(8) {
        return Err(Error::Container(format!("blob of {} bytes is not a whole number of f64s", blob.len())));
    }
    let data = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
    Ok((manifest, data))
}

/// Take `entry`'s slice out of the blob, checking it fits.
pub fn blob_tensor(blob: &[f64], entry: &BlobEntry, what: &str) -> Result<Tensor> {
    let n: usize = entry.shape.iter().product();
    if n != entry.len {
        return Err(Error::Container(format!(
            "{what}: shape {:?} holds {n} values, manifest says {}",
            entry.shape, entry.len
        )));
    }
    let end = entry.offset.checked_add(entry.len).filter(|&e| e <= blob.len()).ok_or_else(|| {
        Error::Container(format!(
            "{what}: range {}..{} exceeds blob of {} values",
            entry.offset,
            entry.offset + entry.len,
            blob.len()
        ))
    })?;
    Tensor::new(entry.shape.clone(), blob[entry.offset..end].to_vec())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelManifest {
    format: String,
    input_shape: [usize; 3],
    layers: Vec<serde_json::Value>,
    tensors: Vec<ModelTensor>,
    blob_values: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelTensor {
    layer: usize,
    weights: BlobEntry,
    bias: BlobEntry,
}

const MODEL_FORMAT: &str = "stochdet-model/1";

pub fn save_model(model: &Model, provenance: Option<&Provenance>) -> Result<Vec<u8>> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (i, p) in model.params().iter().enumerate() {
        if let Some(p) = p {
            let weights = BlobEntry { shape: p.weights.shape().to_vec(), offset: blob.len(), len: p.weights.len() };
            blob.extend_from_slice(p.weights.data());
            let bias = BlobEntry { shape: vec![p.bias.len()], offset: blob.len(), len: p.bias.len() };
            blob.extend_from_slice(&p.bias);
            tensors.push(ModelTensor { layer: i, weights, bias });
        }
    }
    let manifest = ModelManifest {
        format: MODEL_FORMAT.into(),
        input_shape: model.input_shape(),
        layers: model.layers().iter().map(serde_json::to_value).collect::<Result<_, _>>()?,
        tensors,
        blob_values: blob.len(),
        provenance: provenance.cloned(),
    };
    write_container(&manifest, &blob)
}

pub fn load_model(bytes: &[u8]) -> Result<Model> {
    Ok(load_model_with_provenance(bytes)?.0)
}

pub fn load_model_with_provenance(bytes: &[u8]) -> Result<(Model, Option<Provenance>)> {
    let (m, blob): (ModelManifest, Vec<f64>) = read_container(bytes)?;
    if m.format != MODEL_FORMAT {
        return Err(Error::Container(format!("unknown format {:?}", m.format)));
    }
    if blob.len() != m.blob_values {
        return Err(Error::Container(format!("blob holds {} values, manifest declares {}", blob.len(), m.blob_values)));
    }
    let layers = m
        .layers
        .into_iter()
        .enumerate()
        .map(|(i, v)| serde_json::from_value::<LayerSpec>(v).map_err(|e| Error::Container(format!("layer {i}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let mut params: Vec<Option<Params>> = vec![None; layers.len()];
    for t in &m.tensors {
        let kind = layers
            .get(t.layer)
            .ok_or_else(|| Error::Container(format!("tensor for missing layer {}", t.layer)))?
            .kind
            .name();
        let what = format!("layer {} ({kind})", t.layer);
        let weights = blob_tensor(&blob, &t.weights, &what)?;
        let bias = blob_tensor(&blob, &t.bias, &what)?.into_data();
        params[t.layer] = Some(Params { weights, bias });
    }
    let model = Model::new(m.input_shape, layers, params).map_err(|e| match e {
        Error::Layer { layer, detail } => Error::Container(format!("layer {layer}: {detail}")),
        other => other,
    })?;
    Ok((model, m.provenance))
}
