//! Named parameter storage, the trainable set, checkpoints and optimizers.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic   b"LIRACKPT"
//! version u32
//! count   u32
//! repeat count times:
//!   name_len u32, name bytes (UTF-8)
//!   ndim u32, dims u64 × ndim
//!   data f64 × product(dims)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{LiraError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LIRACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    trainable: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a parameter. New parameters start trainable.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        self.trainable.insert(name.clone());
        self.params.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| LiraError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| LiraError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    pub fn trainable(&self) -> &BTreeSet<String> {
        &self.trainable
    }

    pub fn set_trainable<I, S>(&mut self, names: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set = BTreeSet::new();
        for n in names {
            let n = n.into();
            if !self.params.contains_key(&n) {
                return Err(LiraError::UnknownParam(n));
            }
            set.insert(n);
        }
        self.trainable = set;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        self.trainable.clear();
    }

    /// Names sharing a prefix, e.g. `"sefe.mhca."`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.names().filter(move |n| n.starts_with(prefix))
    }

    /// Stores gradients on the parameter tensors' `grad` fields, replacing
    /// whatever was there. Parameters absent from `grads` are cleared.
    pub fn attach_grads(&mut self, grads: &BTreeMap<String, Vec<f64>>) {
        for (name, t) in self.params.iter_mut() {
            t.grad = grads.get(name).cloned();
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint. Every parameter comes back trainable.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
            let name = String::from_utf8(name).map_err(|_| bad("name not UTF-8"))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|_| bad("truncated shape"))?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|_| bad("truncated data"))?;
                data.push(f64::from_le_bytes(b));
            }
            store.insert(name, Tensor::new(shape, data)?);
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copies values from `other` for every name present in both, checking
    /// shapes. The trainable set is left alone.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in self.params.iter_mut() {
            let src = other.get(name)?;
            if src.shape() != t.shape() {
                return Err(LiraError::shape("load_values_from", t.shape(), src.shape()));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        if let Some(extra) = other.names().find(|n| !self.params.contains_key(*n)) {
            return Err(LiraError::UnknownParam(extra.to_string()));
        }
        Ok(())
    }
}

fn bad(msg: &str) -> LiraError {
    LiraError::Format(format!("checkpoint: {msg}"))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| bad("truncated integer"))?;
    Ok(u32::from_le_bytes(b))
}

/// Normal(0, std) initialisation.
pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}

pub trait Optimizer {
    /// Applies one update to every trainable parameter with a gradient.
    fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>) -> Result<()>;
}

/// Plain SGD with a fixed learning rate.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        for (name, g) in grads {
            if !store.is_trainable(name) {
                continue;
            }
            let t = store.get_mut(name)?;
            for (p, d) in t.data_mut().iter_mut().zip(g) {
                *p -= self.lr * d;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            if !store.is_trainable(name) {
                continue;
            }
            let t = store.get_mut(name)?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((p, &d), mi), vi) in t.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * d;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * d * d;
                *p -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = ParamStore::new();
        s.insert("a.w", normal(&[3, 4], 1.0, &mut rng));
        s.insert("b.bias", normal(&[4], 1.0, &mut rng));
        s.insert("c", Tensor::new(vec![1], vec![f64::MIN_POSITIVE]).unwrap());
        s
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let s = sample_store();
        let bytes = s.to_bytes();
        let back = ParamStore::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        for (name, t) in s.iter() {
            let b = back.get(name).unwrap();
            assert_eq!(b.shape(), t.shape());
            assert!(b.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let bytes = sample_store().to_bytes();
        assert!(ParamStore::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(ParamStore::from_bytes(&bad_magic).is_err());
        let mut trailing = bytes;
        trailing.push(0);
        assert!(ParamStore::from_bytes(&trailing).is_err());
    }

    #[test]
    fn frozen_params_untouched_by_optimizers() {
        let mut s = sample_store();
        s.set_trainable(["a.w"]).unwrap();
        let before = s.clone();
        let grads: BTreeMap<String, Vec<f64>> = s.iter().map(|(n, t)| (n.to_string(), vec![1.0; t.len()])).collect();
        Sgd { lr: 0.1 }.step(&mut s, &grads).unwrap();
        Adam::new(0.1).step(&mut s, &grads).unwrap();
        assert_eq!(s.get("b.bias").unwrap().data(), before.get("b.bias").unwrap().data());
        assert_ne!(s.get("a.w").unwrap().data(), before.get("a.w").unwrap().data());
    }

    #[test]
    fn unknown_trainable_rejected() {
        let mut s = sample_store();
        assert!(matches!(s.set_trainable(["nope"]), Err(LiraError::UnknownParam(_))));
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip_any_values(vals in prop::collection::vec(any::<f64>(), 1..40), name in "[a-z.]{1,12}") {
            let mut s = ParamStore::new();
            s.insert(name.clone(), Tensor::new(vec![vals.len()], vals.clone()).unwrap());
            let back = ParamStore::from_bytes(&s.to_bytes()).unwrap();
            let got = back.get(&name).unwrap().data();
            prop_assert!(got.iter().zip(&vals).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
