//! Checkpoint container.
//!
//! Layout: magic `HCK1`, version u32 LE, manifest length u32 LE, manifest
//! JSON, then the payload of raw little-endian f32 arrays, row-major.
//! The manifest names each tensor with its shape, byte offset and element
//! count, plus the full model configuration. Offsets are validated as
//! non-overlapping and in-bounds; save -> load -> save is byte-identical.

use crate::dataset::Vocabulary;
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::rwa::RwaConfig;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"HCK1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Caption { encoder: EncoderConfig, decoder: DecoderConfig, vocab: Vec<String> },
    RegionWord { encoder: EncoderConfig, rwa: RwaConfig, vocab: Vec<String> },
}

impl ModelConfig {
    pub fn vocab(&self) -> Result<Vocabulary> {
        let tokens = match self {
            ModelConfig::Caption { vocab, .. } => vocab.clone(),
            ModelConfig::RegionWord { vocab, .. } => vocab.clone(),
        };
        Vocabulary::from_tokens(tokens)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
    /// Element count.
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(
    path: &Path,
    config: &ModelConfig,
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload: Vec<u8> = Vec::new();
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape.clone(),
            offset: payload.len(),
            len: t.numel(),
        });
        for v in &t.data {
            payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let manifest = serde_json::to_vec(&Manifest { config: config.clone(), tensors: entries })?;
    let mut out = Vec::with_capacity(12 + manifest.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, Vec<(String, Tensor)>)> {
    let bytes = std::fs::read(path)?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, Vec<(String, Tensor)>)> {
    if bytes.len() < 12 {
        return Err(Error::Format("file shorter than the fixed header".to_string()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            &bytes[0..4],
            MAGIC
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + mlen {
        return Err(Error::Format("manifest extends past end of file".to_string()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[12..12 + mlen])
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let payload = &bytes[12 + mlen..];

    // offsets must be non-overlapping and in-bounds
    let mut spans: Vec<(usize, usize, &str)> = manifest
        .tensors
        .iter()
        .map(|e| (e.offset, e.offset + 4 * e.len, e.name.as_str()))
        .collect();
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[0].1 > w[1].0 {
            return Err(Error::Corruption(format!(
                "tensors {} and {} overlap in the payload",
                w[0].2, w[1].2
            )));
        }
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        if e.shape.iter().product::<usize>() != e.len {
            return Err(Error::Corruption(format!(
                "tensor {}: shape {:?} disagrees with len {}",
                e.name, e.shape, e.len
            )));
        }
        let end = e.offset + 4 * e.len;
        if end > payload.len() {
            return Err(Error::Corruption(format!(
                "tensor {}: payload truncated ({} bytes needed, {} present)",
                e.name,
                end,
                payload.len()
            )));
        }
        let data: Vec<f64> = payload[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.push((e.name.clone(), Tensor::new(data, e.shape.clone())));
    }
    Ok((manifest.config, tensors))
}

/// Copy loaded tensors into a model's parameters by name; every parameter
/// must be present with a matching shape.
pub fn restore_named(
    loaded: Vec<(String, Tensor)>,
    targets: Vec<(String, &mut Tensor)>,
) -> Result<()> {
    let mut map: std::collections::HashMap<String, Tensor> = loaded.into_iter().collect();
    for (name, slot) in targets {
        let t = map.remove(&name).ok_or_else(|| {
            Error::Corruption(format!("checkpoint is missing tensor {name}"))
        })?;
        if t.shape != slot.shape {
            return Err(Error::Corruption(format!(
                "tensor {name}: shape {:?} in checkpoint, {:?} in model",
                t.shape, slot.shape
            )));
        }
        *slot = t;
    }
    Ok(())
}
