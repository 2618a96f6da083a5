//! Binary checkpoint layout (all integers and floats little-endian, lengths
//! as u64):
//!
//! ```text
//! magic      8 bytes "PPRLCKPT"
//! version    u32
//! spec       length-prefixed UTF-8 JSON of AgentSpec
//! params     u64 count, then per tensor: name, u64 ndim, u64 dims, f64 data
//! target     same layout as params
//! optimizer  u64 step, u64 count, then per tensor: m and v as f64 arrays
//! actor opt  same layout as optimizer
//! alpha opt  same layout as optimizer (one tensor)
//! rng        32-byte seed, u64 stream, u128 word position
//! updates    u64
//! extra      u8 flag, then length-prefixed bytes when set
//! ```

use std::fs;
use std::path::Path;

use super::bytes::{ByteReader, ByteWriter};
use super::{Agent, AgentSpec};
use crate::error::{Error, Result};
use crate::rng::RngState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PPRLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Agent {
    /// Serializes the full agent; `extra` carries caller-defined state.
    pub fn to_bytes(&self, extra: Option<&[u8]>) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.buf.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.str(&serde_json::to_string(&self.spec).expect("spec serializes"));
        w.store(&self.store);
        w.store(&self.target);
        w.adam_states(self.optim.step, &self.optim.states);
        w.adam_states(self.actor_optim.step, &self.actor_optim.states);
        w.adam_states(self.alpha_step, std::slice::from_ref(&self.alpha_state));
        w.rng(&RngState::capture(&self.rng));
        w.u64(self.updates);
        w.bool(extra.is_some());
        if let Some(e) = extra {
            w.bytes(e);
        }
        w.buf
    }

    pub fn from_bytes(data: &[u8]) -> Result<(Self, Option<Vec<u8>>)> {
        let mut r = ByteReader::new(data);
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let spec: AgentSpec =
            serde_json::from_str(r.str()?).map_err(|e| Error::Checkpoint(format!("bad spec: {e}")))?;
        let mut agent = Agent::new(spec, 0)?;
        r.store_into(&mut agent.store)?;
        r.store_into(&mut agent.target)?;
        agent.optim.step = r.adam_states(&mut agent.optim.states)?;
        agent.actor_optim.step = r.adam_states(&mut agent.actor_optim.states)?;
        agent.alpha_step = r.adam_states(std::slice::from_mut(&mut agent.alpha_state))?;
        agent.rng = r.rng()?.restore();
        agent.updates = r.u64()?;
        let extra = if r.bool()? { Some(r.bytes()?.to_vec()) } else { None };
        if !r.is_done() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok((agent, extra))
    }
}

/// Writes atomically via a sibling temporary file.
pub fn save_checkpoint(path: &Path, agent: &Agent, extra: Option<&[u8]>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, agent.to_bytes(extra))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Agent, Option<Vec<u8>>)> {
    let data = fs::read(path)?;
    Agent::from_bytes(&data).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
