//! `.idac` checkpoints.
//!
//! Layout, little-endian:
//!
//! ```text
//! "IDAC" | u32 version = 1 | u32 tensor_count
//! tensor_count × (u16 name_len, name, u8 rank, rank × u32 dims, f32 data)
//! ```
//!
//! Tensors appear in canonical order with these names:
//! `adapter.{w1,b1,w2,b2}`, `mask_token`, `item_table`, `id_table`,
//! `position`, `blocks.{l}.{ln1.gain, ln1.bias, attn.wq, attn.bq, attn.wk,
//! attn.bk, attn.wv, attn.bv, attn.wo, attn.bo, ln2.gain, ln2.bias, ffn.w1,
//! ffn.b1, ffn.w2, ffn.b2}`, `final_norm.{gain,bias}`. Optional entries are
//! omitted when the model has no such tensor.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{ItemSource, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 4] = b"IDAC";
pub const CKPT_VERSION: u32 = 1;

pub fn save_checkpoint(model: &Model<f32>) -> Result<Vec<u8>> {
    let named = model.params.named();
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.shape().len()).map_err(|_| Error::Shape("rank above 255".into()))?;
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format { offset: offset as u64, message: message.into() }
}

/// Parses the tensor list without interpreting names.
pub fn read_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut pos = 0usize;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if bytes.len() - pos < n {
            return Err(format_err(pos, format!("truncated while reading {what}")));
        }
        pos += n;
        Ok(&bytes[pos - n..pos])
    };
    let u32_of = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    if take(4, "magic")? != CKPT_MAGIC {
        return Err(format_err(0, "bad magic"));
    }
    let version = u32_of(take(4, "version")?);
    if version != CKPT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = u32_of(take(4, "tensor count")?) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let b = take(2, "name length")?;
        let len = u16::from_le_bytes([b[0], b[1]]) as usize;
        let name = std::str::from_utf8(take(len, "name")?)
            .map_err(|_| Error::Format { offset: 0, message: "tensor name is not UTF-8".into() })?
            .to_string();
        let rank = take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_of(take(4, "dimension")?) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(numel * 4, "tensor data")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if pos != bytes.len() {
        return Err(format_err(pos, "trailing bytes"));
    }
    Ok(out)
}

/// Rebuilds a model for `config` from checkpoint bytes. Every tensor must be
/// present with the shape `config` implies, and no others.
pub fn load_checkpoint(bytes: &[u8], config: &ModelConfig) -> Result<Model<f32>> {
    let tensors = read_tensors(bytes)?;
    let mut by_name: HashMap<String, Tensor<f32>> = HashMap::new();
    for (name, t) in tensors {
        if by_name.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    let source = match (by_name.contains_key("adapter.w1"), by_name.contains_key("id_table")) {
        (true, false) => ItemSource::Text,
        (true, true) => ItemSource::TextId,
        (false, _) if by_name.contains_key("item_table") => ItemSource::IdOnly,
        _ => return Err(Error::Checkpoint("neither adapter nor item table present".into())),
    };
    let template = Model::<f32>::new(config.clone(), source, 0)?;
    let names: Vec<String> = template.params.named().into_iter().map(|(n, _)| n).collect();
    let mut model = template;
    for (name, slot) in names.iter().zip(model.params.slots_mut()) {
        let t = by_name.remove(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "{name} has shape {:?}, config implies {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t.with_grad();
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(model)
}

pub fn write_checkpoint(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, save_checkpoint(model)?)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Model<f32>> {
    load_checkpoint(&fs::read(path)?, config)
}
