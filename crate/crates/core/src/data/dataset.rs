use std::path::Path;

use super::Reader;
use crate::error::{MsgcError, Result};
use crate::tensor::Tensor4;

pub const DATASET_MAGIC: [u8; 4] = *b"MSGD";
pub const DATASET_VERSION: u32 = 1;

/// Images stored as float32 CHW planes, labels as class indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub images: Vec<f32>,
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let l = self.sample_len();
        &self.images[i * l..(i + 1) * l]
    }

    /// Gathers samples into a double-precision batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor4, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| f64::from(v)));
        }
        let x = Tensor4::from_vec(indices.len(), self.channels, self.height, self.width, data).expect("sized batch");
        (x, indices.iter().map(|&i| self.labels[i] as usize).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.len() * self.sample_len() {
            return Err(MsgcError::shape(format!(
                "{} samples of {} values need {} floats, have {}",
                self.len(),
                self.sample_len(),
                self.len() * self.sample_len(),
                self.images.len()
            )));
        }
        for (index, &label) in self.labels.iter().enumerate() {
            if label as usize >= self.classes {
                return Err(MsgcError::LabelOutOfRange { index, label, classes: self.classes as u32 });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + 4 * (self.images.len() + self.labels.len()));
        out.extend_from_slice(&DATASET_MAGIC);
        for v in [DATASET_VERSION as usize, self.len(), self.channels, self.height, self.width, self.classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.images {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.labels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "dataset");
        r.magic(DATASET_MAGIC)?;
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(MsgcError::UnsupportedVersion(version));
        }
        let count = r.u32()? as usize;
        let (channels, height, width) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let classes = r.u32()? as usize;
        let floats = count
            .checked_mul(channels)
            .and_then(|v| v.checked_mul(height))
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| MsgcError::Truncated("dataset: declared size overflows".into()))?;
        let needed = floats.checked_add(count).and_then(|v| v.checked_mul(4));
        if needed.map_or(true, |n| n > r.remaining()) {
            return Err(MsgcError::Truncated(format!(
                "dataset: header declares {count} samples of {channels}x{height}x{width}, body has {} bytes",
                r.remaining()
            )));
        }
        let images = r.f32s(floats)?;
        let labels = (0..count).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let ds = Self { channels, height, width, classes, images, labels };
        ds.validate()?;
        if ds.images.iter().any(|v| !v.is_finite()) {
            return Err(MsgcError::NonFinite("dataset contains non-finite pixels".into()));
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
