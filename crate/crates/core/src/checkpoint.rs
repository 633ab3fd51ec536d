//! Checkpoint container.
//!
//! ```text
//! magic   "CSCK"          4 bytes
//! version u16             currently 1
//! config  u32 length + UTF-8 JSON echo of the run
//! count   u32
//! count × { u32 name length, name, tensor body (see `format`) }
//! ```
//!
//! Parameters are stored as f64 so a load restores them bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{encode_tensor_body, ByteReader, DType};
use crate::model::{Cstnet, CstnetConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CSCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// JSON header of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: CstnetConfig,
    /// Epochs completed when the checkpoint was written.
    pub epoch: usize,
    /// Seed the parameters were initialised from.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(net: &Cstnet, epoch: usize, seed: u64) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                model: net.cfg.clone(),
                epoch,
                seed,
            },
            tensors: net
                .store
                .entries()
                .iter()
                .map(|e| (e.name.clone(), e.value.clone()))
                .collect(),
        }
    }

    /// Rebuilds the network and loads every stored tensor into it.
    pub fn into_model(self) -> Result<Cstnet> {
        let mut net = Cstnet::new(self.meta.model, self.meta.seed)?;
        net.store.load_values(self.tensors)?;
        Ok(net)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let json = serde_json::to_string(&self.meta)
            .map_err(|e| Error::config(format!("checkpoint header: {e}")))?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            encode_tensor_body(t, DType::F64, &mut out);
        }
        Ok(out)
    }

    pub fn decode(file: &Path, buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(file, buf);
        r.header(&CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let len = r.u32()? as usize;
        let at = r.offset();
        let json = std::str::from_utf8(r.bytes(len)?).map_err(|e| r.error_at(at, e.to_string()))?;
        let meta: CheckpointMeta =
            serde_json::from_str(json).map_err(|e| r.error_at(at, format!("header: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let at = r.offset();
            let name = std::str::from_utf8(r.bytes(len)?)
                .map_err(|e| r.error_at(at, e.to_string()))?
                .to_string();
            let (_, t) = r.tensor_body()?;
            tensors.push((name, t));
        }
        if !r.is_at_end() {
            return Err(r.error("trailing bytes after last tensor"));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(path, &buf)
    }
}
