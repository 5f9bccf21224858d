use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"LGAN";
const CHECKPOINT_VERSION: u32 = 1;

/// Seeded uniform initializer: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn uniform(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        Tensor::new(shape, data).expect("shape and data agree")
    }
}

/// Named trainable tensors. Iteration order is sorted by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
    pub rng_seed: u64,
}

impl ParamStore {
    pub fn new(rng_seed: u64) -> Self {
        ParamStore { entries: BTreeMap::new(), rng_seed }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    /// Replaces an existing entry, keeping its shape.
    pub fn replace(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::dim(format!(
                "parameter {name:?} has shape {:?}, replacement has {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Places every parameter on the tape as a trainable leaf.
    pub fn to_tape(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(v.clone())))
            .collect()
    }

    /// Overwrites the `embedding` entry with vectors from a checkpoint-format file.
    pub fn load_embedding(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let loaded = read_checkpoint(path)?;
        let table = loaded
            .get("embedding")
            .ok_or_else(|| Error::Data("embedding file has no \"embedding\" entry".into()))?;
        self.replace("embedding", table.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format { offset: 0, msg: "bad checkpoint magic".into() });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format { offset: 4, msg: format!("unsupported version {version}") });
        }
        let count = r.u32()?;
        let mut store = ParamStore::new(0);
        for _ in 0..count {
            let at = r.pos as u64;
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format { offset: at, msg: "name is not UTF-8".into() })?
                .to_owned();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| r.err("size overflow"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::Format { offset: at, msg: e.to_string() })?;
            store
                .insert(name, t)
                .map_err(|e| Error::Format { offset: at, msg: e.to_string() })?;
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes after last parameter"));
        }
        Ok(store)
    }
}

pub fn write_checkpoint(path: impl AsRef<Path>, params: &ParamStore) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, params.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ParamStore::from_bytes(&bytes)
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn err(&self, msg: &str) -> Error {
        Error::Format { offset: self.pos as u64, msg: msg.into() }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamStore::new(1);
        p.insert("a", Tensor::zeros(vec![1])).unwrap();
        assert!(p.insert("a", Tensor::zeros(vec![1])).is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = Init::new(3).uniform(vec![4, 5], 16);
        let b = Init::new(3).uniform(vec![4, 5], 16);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn truncated_checkpoint_is_format_error() {
        let mut p = ParamStore::new(0);
        p.insert("w", Init::new(1).uniform(vec![2, 3], 3)).unwrap();
        let bytes = p.to_bytes();
        for cut in [0, 3, 9, bytes.len() - 1] {
            assert!(matches!(ParamStore::from_bytes(&bytes[..cut]), Err(Error::Format { .. })));
        }
    }

    #[test]
    fn layout_is_little_endian_with_header() {
        let mut p = ParamStore::new(0);
        p.insert("ab", Tensor::new(vec![1], vec![1.5]).unwrap()).unwrap();
        let b = p.to_bytes();
        assert_eq!(&b[..4], b"LGAN");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(&b[16..18], b"ab");
        assert_eq!(&b[18..22], &1u32.to_le_bytes());
        assert_eq!(&b[22..26], &1u32.to_le_bytes());
        assert_eq!(&b[26..34], &1.5f64.to_le_bytes());
        assert_eq!(b.len(), 34);
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_bit_exact(
            vals in prop::collection::vec(any::<f64>(), 1..40),
            name in "[a-z._]{1,12}",
        ) {
            let mut p = ParamStore::new(0);
            let n = vals.len();
            p.insert(name, Tensor::new(vec![n], vals.clone()).unwrap()).unwrap();
            let back = ParamStore::from_bytes(&p.to_bytes()).unwrap();
            let (_, t) = back.iter().next().unwrap();
            let bits: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = vals.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, want);
        }
    }
}
