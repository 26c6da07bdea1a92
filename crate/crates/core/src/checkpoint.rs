//! Versioned checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "SRAPFCKP"
//! version      u32       1
//! header_len   u64       byte length of the JSON header
//! header       JSON      architecture, tensor table, run metadata
//! tensors      f64 LE    row-major, in tensor-table order
//! ```
//!
//! See `docs/checkpoint.md` for the header schema.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DualEncoderModel, FreezePlan, ModelConfig, ParamGroup};

pub const MAGIC: &[u8; 8] = b"SRAPFCKP";
pub const FORMAT_VERSION: u32 = 1;

/// A model snapshot with the metadata needed to audit how it was selected.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: DualEncoderModel,
    pub stage: String,
    /// 1-based epoch the snapshot was taken after; 0 for an untrained model.
    pub epoch: usize,
    pub id_val_top1: f64,
    pub config_hash: String,
    pub freeze_plan: Option<FreezePlan>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: ParamGroup,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    tensors: Vec<TensorEntry>,
    freeze_plan: Option<FreezePlan>,
    stage: String,
    epoch: usize,
    id_val_top1: f64,
    config_hash: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if !(0.0..=1.0).contains(&self.id_val_top1) {
            return Err(Error::Checkpoint(format!(
                "id_val_top1 = {} outside [0, 1]",
                self.id_val_top1
            )));
        }
        let header = Header {
            model_config: self.model.config.clone(),
            tensors: self
                .model
                .param_info()
                .into_iter()
                .map(|p| TensorEntry {
                    name: p.name,
                    group: p.group,
                    shape: [p.shape.0, p.shape.1],
                })
                .collect(),
            freeze_plan: self.freeze_plan.clone(),
            stage: self.stage.clone(),
            epoch: self.epoch,
            id_val_top1: self.id_val_top1,
            config_hash: self.config_hash.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + header.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.model.tensors() {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(err("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + header_len).ok_or_else(|| err("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut model = DualEncoderModel::new(header.model_config.clone(), 0)?;
        let expected = model.param_info();
        if expected.len() != header.tensors.len() {
            return Err(err("tensor table does not match architecture"));
        }
        for (e, t) in expected.iter().zip(&header.tensors) {
            if e.name != t.name || e.group != t.group || [e.shape.0, e.shape.1] != t.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {} does not match architecture entry {}",
                    t.name, e.name
                )));
            }
        }
        let mut data = &bytes[20 + header_len..];
        for t in model.tensors_mut() {
            let need = t.len() * 8;
            if data.len() < need {
                return Err(err("truncated tensor data"));
            }
            for (v, chunk) in t.iter_mut().zip(data[..need].chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
            data = &data[need..];
        }
        if !data.is_empty() {
            return Err(err("trailing bytes after tensor data"));
        }
        Ok(Self {
            model,
            stage: header.stage,
            epoch: header.epoch,
            id_val_top1: header.id_val_top1,
            config_hash: header.config_hash,
            freeze_plan: header.freeze_plan,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_freeze_plan;

    fn sample() -> Checkpoint {
        let model = DualEncoderModel::new(
            ModelConfig {
                input_dim: 3,
                width: 4,
                hidden: 5,
                visual_blocks: 2,
                text_blocks: 2,
                embed_dim: 3,
                num_classes: 2,
                vocab_size: 16,
            },
            17,
        )
        .unwrap();
        let plan = build_freeze_plan(&model, 1, 0, 1e-6, 1e-3).unwrap();
        Checkpoint {
            model,
            stage: "stage1".into(),
            epoch: 3,
            id_val_top1: 0.75,
            config_hash: "abc".into(),
            freeze_plan: Some(plan),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes;
        bad[8] = 9;
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn accuracy_outside_unit_interval_is_rejected() {
        let mut c = sample();
        c.id_val_top1 = 1.5;
        assert!(c.to_bytes().is_err());
    }
}
