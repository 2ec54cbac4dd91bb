use std::collections::HashSet;
use std::path::Path;

use super::Reader;
use crate::error::{MsgcError, Result};
use crate::params::ParamStore;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MSGC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// A table of named float32 tensors followed by a CRC32 of the table bytes
/// (everything after the tensor count, up to the checksum).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, data: &[f64]) {
        self.tensors.push(NamedTensor { name: name.into(), dims, data: data.iter().map(|&v| v as f32).collect() });
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Every tensor of the store, buffers included.
    pub fn from_store(store: &ParamStore) -> Self {
        let mut c = Self::default();
        for (_, p) in store.iter() {
            c.push(p.name.clone(), p.dims.clone(), &p.data);
        }
        c
    }

    /// Overwrites every store tensor from the checkpoint; each must be present
    /// with identical dims.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone(), p.dims.clone())).collect();
        for (id, name, dims) in ids {
            let t = self
                .get(&name)
                .ok_or_else(|| MsgcError::CheckpointMismatch(format!("missing tensor `{name}`")))?;
            if t.dims != dims {
                return Err(MsgcError::CheckpointMismatch(format!(
                    "`{name}` has dims {:?}, model expects {dims:?}",
                    t.dims
                )));
            }
            for (d, &s) in store.get_mut(id).iter_mut().zip(&t.data) {
                *d = f64::from(s);
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = HashSet::new();
        let mut table = Vec::new();
        for t in &self.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(MsgcError::config(format!("duplicate tensor name `{}`", t.name)));
            }
            if t.dims.iter().product::<usize>() != t.data.len() {
                return Err(MsgcError::shape(format!("tensor `{}` dims {:?} vs {} values", t.name, t.dims, t.data.len())));
            }
            table.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            table.extend_from_slice(t.name.as_bytes());
            table.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                table.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                table.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(16 + table.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        out.extend_from_slice(&table);
        out.extend_from_slice(&crc32fast::hash(&table).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(MsgcError::UnsupportedVersion(version));
        }
        let count = r.u32()? as usize;
        let table_start = r.pos;
        let mut tensors = Vec::new();
        let mut seen = HashSet::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| MsgcError::InvalidValue { key: "tensor name".into(), reason: "not UTF-8".into() })?
                .to_string();
            let rank = r.u32()? as usize;
            if rank.saturating_mul(4) > r.remaining() {
                return Err(MsgcError::Truncated(format!("checkpoint: rank {rank} of `{name}` exceeds file")));
            }
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.saturating_mul(4) <= r.remaining())
                .ok_or_else(|| MsgcError::Truncated(format!("checkpoint: payload of `{name}` exceeds file")))?;
            let data = r.f32s(n)?;
            if !seen.insert(name.clone()) {
                return Err(MsgcError::InvalidValue { key: name, reason: "duplicate tensor name".into() });
            }
            tensors.push(NamedTensor { name, dims, data });
        }
        let table_end = r.pos;
        let stored = r.u32()?;
        r.finish()?;
        let computed = crc32fast::hash(&bytes[table_start..table_end]);
        if stored != computed {
            return Err(MsgcError::CrcMismatch { stored, computed });
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = Checkpoint::default();
        for i in 0..5 {
            let dims: Vec<usize> = (0..rng.gen_range(0..4)).map(|_| rng.gen_range(1..4)).collect();
            let n = dims.iter().product();
            c.tensors.push(NamedTensor {
                name: format!("t{i}.ü"),
                dims,
                data: (0..n).map(|_| f32::from_bits(rng.gen::<u32>() & 0x7f7f_ffff)).collect(),
            });
        }
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for seed in 0..20 {
            let c = random(seed);
            let bytes = c.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back.to_bytes().unwrap(), bytes);
            for (a, b) in c.tensors.iter().zip(&back.tensors) {
                assert_eq!(a.dims, b.dims);
                assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn corruption_is_classified() {
        let bytes = random(1).to_bytes().unwrap();
        let mut flipped = bytes.clone();
        let k = flipped.len() - 6;
        flipped[k] ^= 0x40;
        assert_eq!(Checkpoint::from_bytes(&flipped).unwrap_err().category(), "crc-mismatch");
        assert_eq!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2]).unwrap_err().category(), "truncated");
        let mut magic = bytes.clone();
        magic[3] = b'D';
        assert_eq!(Checkpoint::from_bytes(&magic).unwrap_err().category(), "bad-magic");
        let mut long = bytes.clone();
        long.extend_from_slice(&[1, 2]);
        assert_eq!(Checkpoint::from_bytes(&long).unwrap_err().category(), "trailing-bytes");
    }

    #[test]
    fn store_round_trip_and_mismatch() {
        let mut store = ParamStore::new();
        store.add("a", crate::params::ParamKind::Backbone, vec![2], vec![0.5, -2.0]).unwrap();
        let c = Checkpoint::from_store(&store);
        let mut other = ParamStore::new();
        let id = other.add("a", crate::params::ParamKind::Backbone, vec![2], vec![0.0, 0.0]).unwrap();
        c.load_into(&mut other).unwrap();
        assert_eq!(other.get(id), &[0.5, -2.0]);
        let mut wrong = ParamStore::new();
        wrong.add("a", crate::params::ParamKind::Backbone, vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(c.load_into(&mut wrong).unwrap_err().category(), "checkpoint-mismatch");
    }
}
