//! On-disk formats (datasets, checkpoints, run configs) and the synthetic
//! texture task.

mod checkpoint;
mod config;
mod dataset;
mod synth;

pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{RunConfig, CONFIG_KEYS};
pub use dataset::{Dataset, DATASET_MAGIC, DATASET_VERSION};
pub use synth::{grating_value, synth_generate, SynthConfig};

use crate::error::{MsgcError, Result};

/// Little-endian cursor that reports short reads as truncation.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            MsgcError::Truncated(format!(
                "{}: need {n} bytes at offset {}, file has {}",
                self.what,
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4)?.try_into().expect("4 bytes");
        if found != expected {
            return Err(MsgcError::BadMagic { expected, found });
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| MsgcError::Truncated(format!("{}: size overflow", self.what)))?;
        Ok(self.take(len)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(MsgcError::TrailingBytes(format!(
                "{}: {} unexpected bytes at offset {}",
                self.what,
                self.remaining(),
                self.pos
            )));
        }
        Ok(())
    }
}
