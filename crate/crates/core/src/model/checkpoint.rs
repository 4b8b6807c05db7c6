//! Checkpoint file layout (all integers little-endian):
//!
//! ```text
//! b"COVTCKPT"                 magic, 8 bytes
//! u32                         format version
//! u64, [u8]                   JSON header length and bytes: {"config", "state"}
//! u64                         parameter count, then per parameter:
//!   u32, [u8]                   name length and UTF-8 name
//!   CVT1 tensor record
//! u64                         velocity count, then records as above
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Covt, ModelConfig};
use crate::tensor::{read_tensor, write_tensor, ByteReader, FormatError, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"COVTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a training run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub seed: u64,
    pub total_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub state: TrainState,
    pub params: Vec<(String, Tensor)>,
    /// Momentum buffers by parameter name; empty before the first step.
    pub velocity: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    state: TrainState,
}

fn write_named(out: &mut Vec<u8>, items: &[(String, Tensor)]) {
    out.extend((items.len() as u64).to_le_bytes());
    for (name, t) in items {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        write_tensor(out, t).expect("writing to a Vec cannot fail");
    }
}

fn read_named(r: &mut ByteReader<'_>, what: &str) -> Result<Vec<(String, Tensor)>, FormatError> {
    let count = r.u64(&format!("{what} count"))?;
    // Each record needs at least a name length and a tensor header.
    if count.saturating_mul(24) > r.remaining() as u64 {
        return Err(r.fail(format!("{what} count {count} exceeds remaining bytes")));
    }
    (0..count)
        .map(|_| {
            let len = r.u32("name length")? as usize;
            let at = r.offset();
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| FormatError { offset: at, what: "name is not UTF-8".into() })?
                .to_string();
            Ok((name, read_tensor(r)?))
        })
        .collect()
}

impl Checkpoint {
    pub fn from_model(model: &Covt, state: TrainState, velocity: Vec<(String, Tensor)>) -> Self {
        Checkpoint { config: model.config.clone(), state, params: model.named_params(), velocity }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header { config: self.config.clone(), state: self.state.clone() })
            .expect("config serializes");
        let mut out = Vec::new();
        out.extend(CHECKPOINT_MAGIC);
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        out.extend((header.len() as u64).to_le_bytes());
        out.extend(&header);
        write_named(&mut out, &self.params);
        write_named(&mut out, &self.velocity);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(FormatError { offset: 0, what: "not a checkpoint (bad magic)".into() }.into());
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let len = r.u64("header length")?;
        let at = r.offset();
        if len > r.remaining() as u64 {
            return Err(r.fail(format!("truncated header: need {len} bytes, {} left", r.remaining())).into());
        }
        let header: Header = serde_json::from_slice(r.take(len as usize, "header")?)
            .map_err(|e| FormatError { offset: at, what: format!("bad header JSON: {e}") })?;
        let params = read_named(&mut r, "parameter")?;
        let velocity = read_named(&mut r, "velocity")?;
        if r.remaining() != 0 {
            return Err(r.fail(format!("{} trailing bytes", r.remaining())).into());
        }
        Ok(Checkpoint { config: header.config, state: header.state, params, velocity })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model this checkpoint was taken from.
    pub fn to_model(&self) -> Result<Covt> {
        let mut model = Covt::new(self.config.clone(), self.state.seed)?;
        model.load_params(&self.params)?;
        Ok(model)
    }
}
