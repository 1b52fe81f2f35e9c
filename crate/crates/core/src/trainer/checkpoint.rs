//! Checkpoint files.
//!
//! Layout: the 8-byte magic, a little-endian `u32` format version, a
//! little-endian `u64` payload length, then the bincode-encoded
//! [`TrainerState`]. Replay buffers are stored only when
//! `checkpoint_buffers` is set; otherwise they come back empty.

use std::io::Write;
use std::path::Path;

use super::{Trainer, TrainerState};
use crate::error::{Error, Result};
use crate::replay::{HighBuffer, LowBuffer};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MNTRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const HEADER_LEN: usize = 8 + 4 + 8;

pub(super) fn encode(state: &TrainerState) -> Result<Vec<u8>> {
    let payload = bincode::serialize(state).map_err(|e| Error::Corrupt(e.to_string()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

pub(super) fn decode(bytes: &[u8]) -> Result<TrainerState> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Corrupt("missing checkpoint header".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != len {
        return Err(Error::Corrupt(format!(
            "payload is {} bytes, header says {len}",
            payload.len()
        )));
    }
    bincode::deserialize(payload).map_err(|e| Error::Corrupt(e.to_string()))
}

impl Trainer {
    pub fn checkpoint_bytes(&mut self) -> Result<Vec<u8>> {
        if self.state.config.checkpoint_buffers {
            return encode(&self.state);
        }
        let (hc, lc) = (self.state.high_buffer.capacity(), self.state.low_buffer.capacity());
        let high = std::mem::replace(&mut self.state.high_buffer, HighBuffer::new(hc));
        let low = std::mem::replace(&mut self.state.low_buffer, LowBuffer::new(lc));
        let out = encode(&self.state);
        self.state.high_buffer = high;
        self.state.low_buffer = low;
        out
    }

    /// Writes the checkpoint atomically (temporary file, then rename).
    pub fn save(&mut self, path: &Path) -> Result<()> {
        let bytes = self.checkpoint_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        Trainer::from_state(decode(bytes)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }
}
