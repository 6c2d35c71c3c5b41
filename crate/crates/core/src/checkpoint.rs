//! Single-file model checkpoints.
//!
//! Layout: the 8-byte magic `ISGCKPT1`, a little-endian `u32` header length,
//! a JSON header, then the model parameters and the optional confidence
//! head parameters as little-endian `f32`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::acquisition::ConfidNetHead;
use crate::error::{Error, Result};
use crate::model::{hash_params, ModelConfig, SegmentationModel, DROPOUT_SITES};

const MAGIC: &[u8; 8] = b"ISGCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    dropout_sites: Vec<String>,
    param_count: usize,
    param_hash: String,
    lineage: String,
    confidnet: Option<HeadHeader>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HeadHeader {
    in_channels: usize,
    param_count: usize,
    model_lineage: String,
}

/// A model and, optionally, a confidence head trained for it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SegmentationModel,
    pub confidnet: Option<ConfidNetHead>,
}

impl Checkpoint {
    pub fn new(model: SegmentationModel) -> Self {
        Self { model, confidnet: None }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            model: self.model.config().clone(),
            dropout_sites: DROPOUT_SITES.iter().map(|s| s.to_string()).collect(),
            param_count: self.model.param_count(),
            param_hash: self.model.param_hash(),
            lineage: self.model.lineage().to_string(),
            confidnet: self.confidnet.as_ref().map(|h| HeadHeader {
                in_channels: h.in_channels(),
                param_count: h.params().len(),
                model_lineage: h.model_lineage.clone(),
            }),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let head_len = self.confidnet.as_ref().map_or(0, |h| h.params().len());
        let mut out = Vec::with_capacity(12 + json.len() + 4 * (self.model.param_count() + head_len));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.model.params() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(h) = &self.confidnet {
            for v in h.params() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes
            .get(12..12 + len)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut floats = bytes[12 + len..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        if (bytes.len() - 12 - len) % 4 != 0 {
            return Err(Error::Checkpoint("parameter block is not a whole number of floats".into()));
        }
        let params: Vec<f32> = floats.by_ref().take(header.param_count).collect();
        if params.len() != header.param_count {
            return Err(Error::Checkpoint("truncated model parameters".into()));
        }
        if hash_params(&params) != header.param_hash {
            return Err(Error::Checkpoint("model parameters do not match the recorded hash".into()));
        }
        let mut model = SegmentationModel::from_parts(header.model, params)?;
        model.set_lineage(header.lineage);
        let confidnet = match header.confidnet {
            Some(h) => {
                let p: Vec<f32> = floats.by_ref().take(h.param_count).collect();
                if p.len() != h.param_count {
                    return Err(Error::Checkpoint("truncated confidence head parameters".into()));
                }
                Some(ConfidNetHead::from_parts(h.in_channels, p, h.model_lineage)?)
            }
            None => None,
        };
        if floats.next().is_some() {
            return Err(Error::Checkpoint("trailing data after parameters".into()));
        }
        Ok(Self { model, confidnet })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| e.with_context(path.display().to_string()))
    }
}
