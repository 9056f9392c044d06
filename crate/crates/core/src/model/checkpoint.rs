//! Binary checkpoint: magic, little-endian `u64` header length, JSON header,
//! then every parameter as little-endian `f64` in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::data::PreprocessState;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"TABNSAck";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: ModelConfig,
    pub manifest: Vec<ManifestEntry>,
    pub preprocess: Option<PreprocessState>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub preprocess: Option<PreprocessState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            model: self.model.config.clone(),
            manifest: self
                .model
                .params
                .entries()
                .iter()
                .map(|e| ManifestEntry {
                    path: e.path.clone(),
                    shape: e.tensor.shape().to_vec(),
                })
                .collect(),
            preprocess: self.preprocess.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.model.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for e in self.model.params.entries() {
            for v in e.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                header.version
            )));
        }
        let mut model = Model::new(header.model, 0)?;
        let payload = &bytes[16 + len..];
        if model.params.len() != header.manifest.len() {
            return Err(bad("manifest does not match the model configuration"));
        }
        let mut offset = 0;
        for (id, m) in model.params.ids().collect::<Vec<_>>().into_iter().zip(&header.manifest) {
            if model.params.path(id) != m.path || model.params.get(id).shape() != m.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "manifest entry {} {:?} does not match the model",
                    m.path, m.shape
                )));
            }
            let t = model.params.get_mut(id);
            let n = t.len();
            let chunk = payload
                .get(offset * 8..(offset + n) * 8)
                .ok_or_else(|| bad("truncated payload"))?;
            for (dst, src) in t.data_mut().iter_mut().zip(chunk.chunks_exact(8)) {
                *dst = f64::from_le_bytes(src.try_into().expect("8 bytes"));
            }
            offset += n;
        }
        if payload.len() != offset * 8 {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Checkpoint {
            model,
            preprocess: header.preprocess,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, preprocess: Option<&PreprocessState>) -> Result<()> {
    let path = path.as_ref();
    let ck = Checkpoint {
        model: model.clone(),
        preprocess: preprocess.cloned(),
    };
    std::fs::write(path, ck.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
