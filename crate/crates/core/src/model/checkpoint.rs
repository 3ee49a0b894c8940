//! Checkpoint file: `LMAE` magic, u32 format version, u64 header length, JSON header,
//! then little-endian f32 tensor payloads. All integers are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::Params;
use super::network::{Model, ModelParams};
use crate::data::ModelConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LMAE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (name, shape, data) in model.params.named() {
        tensors.push(TensorEntry {
            name,
            shape,
            offset: payload.len(),
        });
        for &v in data {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let bad = |m: &str| Error::Data(format!("checkpoint: {m}"));
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("missing LMAE magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
    let payload = &bytes[header_end..];

    let mut params = ModelParams::zeros(&header.config);
    let expected: Vec<(String, Vec<usize>)> = params.named().into_iter().map(|(n, s, _)| (n, s)).collect();
    if expected.len() != header.tensors.len() {
        return Err(bad("tensor directory does not match the config"));
    }
    for ((slot, (name, shape)), entry) in params.slices_mut().into_iter().zip(&expected).zip(&header.tensors) {
        if &entry.name != name || &entry.shape != shape {
            return Err(bad(&format!("unexpected tensor {} {:?}", entry.name, entry.shape)));
        }
        let end = entry.offset + 4 * slot.len();
        let raw = payload.get(entry.offset..end).ok_or_else(|| bad("truncated payload"))?;
        for (dst, chunk) in slot.iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f64::from(f32::from_le_bytes(chunk.try_into().expect("4 bytes")));
        }
    }
    Model::new(header.config, params)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_save_is_byte_identical() {
        let model = Model::init(ModelConfig::tiny(), 3).unwrap();
        let a = to_bytes(&model).unwrap();
        let back = from_bytes(&a).unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(to_bytes(&back).unwrap(), a);
        // f32 storage: loaded weights are the f32 roundings of the originals
        let orig = model.params.slices().concat();
        let loaded = back.params.slices().concat();
        assert!(orig.iter().zip(&loaded).all(|(o, l)| (*o as f32) as f64 == *l));
    }

    #[test]
    fn layout_starts_with_magic_and_version() {
        let bytes = to_bytes(&Model::init(ModelConfig::tiny(), 0).unwrap()).unwrap();
        assert_eq!(&bytes[..4], b"LMAE");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(&bytes[16..16 + n]).unwrap();
        assert_eq!(header.tensors[0].name, "fuse_embed.weight");
        assert_eq!(header.tensors[0].offset, 0);
        let last = header.tensors.last().unwrap();
        let count: usize = last.shape.iter().product();
        assert_eq!(16 + n + last.offset + 4 * count, bytes.len());
    }

    #[test]
    fn rejects_corrupt_input() {
        let bytes = to_bytes(&Model::init(ModelConfig::tiny(), 0).unwrap()).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(from_bytes(&wrong).is_err());
        let mut wrong = bytes;
        wrong[4] = 9;
        assert!(from_bytes(&wrong).is_err());
    }
}
