//! Named parameter tensors with gradient slots, and the binary checkpoint
//! format.
//!
//! Checkpoint layout, all integers 32-bit little-endian:
//!
//! ```text
//! "MLSA" | version | tensor count
//! per tensor: name length | UTF-8 name | rank | dims... | f32 LE values
//! ```
//!
//! Gradients are not stored. Tensors are written in insertion order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{MlsaError, Result};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MLSA";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
struct Entry<T> {
    value: Tensor<T>,
    grad: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ParameterStore<T> {
    entries: IndexMap<String, Entry<T>>,
    rng_seed: u64,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new(rng_seed: u64) -> Self {
        ParameterStore { entries: IndexMap::new(), rng_seed }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(MlsaError::config(format!("duplicate parameter {name:?}")));
        }
        let grad = Tensor::zeros(value.dims());
        self.entries.insert(name, Entry { value, grad });
        Ok(())
    }

    /// Replaces the value of an existing entry; dims must not change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let entry =
            self.entries.get_mut(name).ok_or_else(|| MlsaError::config(format!("unknown parameter {name:?}")))?;
        if entry.value.dims() != value.dims() {
            return Err(MlsaError::shape(format!(
                "{name}: {:?} cannot replace {:?}",
                value.dims(),
                entry.value.dims()
            )));
        }
        entry.value = value;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.grad)
    }

    pub fn grad_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.grad)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn value_at(&self, idx: usize) -> &Tensor<T> {
        &self.entries[idx].value
    }

    pub(crate) fn add_grad_at(&mut self, idx: usize, g: &[T]) {
        let grad = self.entries[idx].grad.data_mut();
        grad.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>, &Tensor<T>)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value, &e.grad))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, e)| (k.as_str(), &mut e.value, &mut e.grad))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Same entries converted to another precision; gradients are reset.
    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        let mut out = ParameterStore::new(self.rng_seed);
        for (name, e) in &self.entries {
            out.insert(name.clone(), e.value.cast()).expect("names are unique");
        }
        out
    }

    /// Copies every value of `other` into `self`; both must hold exactly the
    /// same names with the same dims.
    pub fn load_values<U: Scalar>(&mut self, other: &ParameterStore<U>) -> Result<()> {
        if other.len() != self.len() {
            return Err(MlsaError::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for (name, value, _) in other.iter() {
            if !self.contains(name) {
                return Err(MlsaError::Checkpoint(format!("unexpected tensor {name:?}")));
            }
            self.set(name, value.cast()).map_err(|e| MlsaError::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| MlsaError::io("<checkpoint>", e);
        let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(io);
        put(CHECKPOINT_MAGIC)?;
        put(&CHECKPOINT_VERSION.to_le_bytes())?;
        put(&u32_of(self.entries.len())?.to_le_bytes())?;
        for (name, e) in &self.entries {
            put(&u32_of(name.len())?.to_le_bytes())?;
            put(name.as_bytes())?;
            put(&u32_of(e.value.rank())?.to_le_bytes())?;
            for &d in e.value.dims() {
                put(&u32_of(d)?.to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(e.value.len() * 4);
            for v in e.value.data() {
                buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
            put(&buf)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(MlsaError::Checkpoint("bad magic bytes".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(MlsaError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)?;
        let mut store = ParameterStore::new(0);
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| MlsaError::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            if !(1..=3).contains(&rank) {
                return Err(MlsaError::Checkpoint(format!("{name}: rank {rank}")));
            }
            let dims = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let mut raw = vec![0u8; n * 4];
            read_exact(&mut r, &mut raw)?;
            let data: Vec<T> =
                raw.chunks_exact(4).map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect();
            let value = Tensor::new(&dims, data).map_err(|e| MlsaError::Checkpoint(format!("{name}: {e}")))?;
            if !value.is_finite() {
                return Err(MlsaError::Checkpoint(format!("{name}: non-finite values")));
            }
            store.insert(name, value).map_err(|e| MlsaError::Checkpoint(e.to_string()))?;
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| MlsaError::io("<checkpoint>", e))? != 0 {
            return Err(MlsaError::Checkpoint("trailing bytes".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| MlsaError::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_checkpoint(&mut w)?;
        w.flush().map_err(|e| MlsaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| MlsaError::io(path, e))?;
        Self::read_checkpoint(BufReader::new(file))
    }
}

fn u32_of(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| MlsaError::Checkpoint(format!("{n} does not fit in 32 bits")))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| MlsaError::Checkpoint("truncated checkpoint".into()))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ParameterStore<f32> {
        let mut s = ParameterStore::new(3);
        s.insert("a", Tensor::vector(vec![1.5, -2.0]).unwrap()).unwrap();
        s.insert("b.W", Tensor::new(&[1, 2, 1], vec![0.25, 4.0]).unwrap()).unwrap();
        s
    }

    #[test]
    fn exact_byte_layout() {
        let mut bytes = Vec::new();
        sample().write_checkpoint(&mut bytes).unwrap();
        let mut want = Vec::new();
        want.extend_from_slice(b"MLSA");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(b"a");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.5f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        want.extend_from_slice(&3u32.to_le_bytes());
        want.extend_from_slice(b"b.W");
        want.extend_from_slice(&3u32.to_le_bytes());
        for d in [1u32, 2, 1] {
            want.extend_from_slice(&d.to_le_bytes());
        }
        want.extend_from_slice(&0.25f32.to_le_bytes());
        want.extend_from_slice(&4.0f32.to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = Vec::new();
        sample().write_checkpoint(&mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ParameterStore::<f32>::read_checkpoint(&bad[..]).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(ParameterStore::<f32>::read_checkpoint(&bad[..]).is_err());
        assert!(ParameterStore::<f32>::read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(ParameterStore::<f32>::read_checkpoint(&bad[..]).is_err());
    }

    #[test]
    fn grads_track_values() {
        let mut s = sample();
        assert!(s.insert("a", Tensor::vector(vec![0.0]).unwrap()).is_err());
        s.add_grad_at(0, &[1.0, 2.0]);
        assert_eq!(s.grad("a").unwrap().data(), &[1.0, 2.0]);
        s.zero_grads();
        assert!(s.iter().all(|(_, v, g)| v.dims() == g.dims() && g.data().iter().all(|&x| x == 0.0)));
        assert!(s.set("a", Tensor::vector(vec![0.0]).unwrap()).is_err());
        assert_eq!(s.num_scalars(), 4);
    }

    #[test]
    fn load_values_requires_same_layout() {
        let mut s = sample();
        let mut other = sample().cast::<f64>();
        other.get_mut("a").unwrap().data_mut()[0] = 9.0;
        s.load_values(&other).unwrap();
        assert_eq!(s.get("a").unwrap().data()[0], 9.0);
        let mut short = ParameterStore::<f32>::new(0);
        short.insert("a", Tensor::vector(vec![0.0, 0.0]).unwrap()).unwrap();
        assert!(s.load_values(&short).is_err());
    }

    proptest! {
        #[test]
        fn checkpoint_round_trips(values in prop::collection::vec(-1e6f32..1e6, 1..40)) {
            let mut s = ParameterStore::new(0);
            s.insert("x", Tensor::vector(values.clone()).unwrap()).unwrap();
            let mut bytes = Vec::new();
            s.write_checkpoint(&mut bytes).unwrap();
            let back = ParameterStore::<f32>::read_checkpoint(&bytes[..]).unwrap();
            prop_assert_eq!(back.get("x").unwrap().data(), &values[..]);
        }
    }
}
