//! Model checkpoints.
//!
//! ```text
//! "MILBAG1"             7 bytes
//! header length H       u32, little-endian
//! header                H bytes of UTF-8 JSON: architecture, pretext head,
//!                       training hyperparameters, tensor list with shapes
//! tensors               f32 little-endian, in header order
//! ```

use std::path::Path;

use milbag_core::milnet::{MilConfig, MilModel};
use milbag_core::numcore::{LayerKind, LayerParams, Tensor};
use milbag_core::ssl::SslTask;
use milbag_core::train::TrainConfig;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::format::json_error_offset;

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"MILBAG1";
pub const CHECKPOINT_VERSION: u32 = 1;

const PREFIX: usize = CHECKPOINT_MAGIC.len() + 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    /// Kind of the layer owning the tensor.
    pub layer: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: MilConfig,
    pub ssl_task: SslTask,
    pub ssl_hidden: usize,
    pub hyperparameters: Option<TrainConfig>,
    pub tensors: Vec<TensorEntry>,
}

fn named_layer<'a>(prefix: &str, l: &'a LayerParams<f32>, out: &mut Vec<(String, String, &'a Tensor<f32>)>) {
    if let Some(w) = &l.weight {
        out.push((format!("{prefix}.weight"), l.kind.name().into(), w));
    }
    if let Some(b) = &l.bias {
        out.push((format!("{prefix}.bias"), l.kind.name().into(), b));
    }
}

/// Every tensor with its name, in `MilModel::params` order.
pub fn named_tensors(model: &MilModel<f32>) -> Vec<(String, String, &Tensor<f32>)> {
    let mut out = Vec::new();
    for (i, l) in model.extractor.iter().enumerate() {
        named_layer(&format!("extractor.{i}"), l, &mut out);
    }
    out.push(("attention.V".into(), "attention".into(), &model.attention_v));
    out.push(("attention.w".into(), "attention".into(), &model.attention_w));
    named_layer("classifier", &model.classifier, &mut out);
    if let Some(head) = &model.ssl_head {
        named_layer("ssl_head.hidden", &head.hidden, &mut out);
        named_layer("ssl_head.output", &head.output, &mut out);
    }
    out
}

fn ssl_of(model: &MilModel<f32>) -> (SslTask, usize) {
    match &model.ssl_head {
        Some(h) => match h.hidden.kind {
            LayerKind::FullyConnected { out_features, .. } => (h.task, out_features),
            _ => (h.task, 0),
        },
        None => (SslTask::None, 0),
    }
}

pub fn encode_checkpoint(model: &MilModel<f32>, hyperparameters: Option<&TrainConfig>) -> Vec<u8> {
    let tensors = named_tensors(model);
    let (ssl_task, ssl_hidden) = ssl_of(model);
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        model: model.config,
        ssl_task,
        ssl_hidden,
        hyperparameters: hyperparameters.cloned(),
        tensors: tensors
            .iter()
            .map(|(name, layer, t)| TensorEntry {
                name: name.clone(),
                layer: layer.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: MilModel<f32>,
    pub header: CheckpointHeader,
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, FormatError> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        let bad = bytes
            .iter()
            .zip(CHECKPOINT_MAGIC)
            .position(|(a, b)| a != b)
            .unwrap_or(bytes.len());
        return Err(FormatError::new(
            bad as u64,
            "not a checkpoint (expected magic \"MILBAG1\")",
        ));
    }
    if bytes.len() < PREFIX {
        return Err(FormatError::new(bytes.len() as u64, "truncated before header length"));
    }
    let header_len = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
    let header_end = PREFIX
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| FormatError::new(bytes.len() as u64, format!("truncated header of {header_len} bytes")))?;
    let raw = &bytes[PREFIX..header_end];
    let header: CheckpointHeader = serde_json::from_slice(raw)
        .map_err(|e| FormatError::new((PREFIX + json_error_offset(raw, &e)) as u64, format!("bad header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(FormatError::new(
            PREFIX as u64,
            format!("format_version {} is not supported", header.format_version),
        ));
    }

    // rebuild the architecture, then overwrite its freshly initialised tensors
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut model = MilModel::<f32>::new(header.model, header.ssl_task, header.ssl_hidden.max(1), &mut rng)
        .map_err(|e| FormatError::new(PREFIX as u64, format!("invalid architecture: {e}")))?;
    let expected: Vec<(String, Vec<usize>)> = named_tensors(&model)
        .into_iter()
        .map(|(n, _, t)| (n, t.shape().to_vec()))
        .collect();
    if expected.len() != header.tensors.len() {
        return Err(FormatError::new(
            PREFIX as u64,
            format!(
                "architecture has {} tensors, header lists {}",
                expected.len(),
                header.tensors.len()
            ),
        ));
    }
    for ((name, shape), entry) in expected.iter().zip(&header.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(FormatError::new(
                PREFIX as u64,
                format!(
                    "tensor {} {:?} does not match architecture tensor {name} {shape:?}",
                    entry.name, entry.shape
                ),
            ));
        }
    }
    let total: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let available = bytes.len() - header_end;
    if available < total * 4 {
        return Err(FormatError::new(
            bytes.len() as u64,
            format!("truncated tensor data: expected {} bytes, found {available}", total * 4),
        ));
    }
    if available > total * 4 {
        return Err(FormatError::new(
            (header_end + total * 4) as u64,
            "trailing bytes after tensor data",
        ));
    }
    let mut at = header_end;
    for p in model.params_mut() {
        for v in p.data_mut() {
            let x = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
            if !x.is_finite() {
                return Err(FormatError::new(at as u64, format!("non-finite parameter {x}")));
            }
            *v = x;
            at += 4;
        }
    }
    Ok(Checkpoint { model, header })
}

pub fn save_checkpoint(path: &Path, model: &MilModel<f32>, hyperparameters: Option<&TrainConfig>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model, hyperparameters)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| Error::format(path, e))
}
