use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Named parameter tree. Names are dotted paths; the first segment is the
/// partition (`trunk`, `head`, `aux`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let tensors = self
            .tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamStore { tensors }
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, va), (kb, vb))| ka == kb && va.bit_eq(vb))
    }

    /// Checks that `other` holds the same names with the same shapes.
    pub fn check_congruent(&self, other: &ParamStore) -> Result<()> {
        for (name, t) in &self.tensors {
            let o = other.get(name)?;
            if o.shape() != t.shape() {
                return Err(shape_err!("parameter {name}: {:?} vs {:?}", t.shape(), o.shape()));
            }
        }
        if self.tensors.len() != other.tensors.len() {
            return Err(shape_err!(
                "parameter count {} vs {}",
                self.tensors.len(),
                other.tensors.len()
            ));
        }
        Ok(())
    }
}

/// How a forward pass places parameters on the tape.
#[derive(Clone, Copy)]
pub struct Bind<'a> {
    store: &'a ParamStore,
    trainable: bool,
}

impl<'a> Bind<'a> {
    /// Parameters are recorded as grad-enabled leaves.
    pub fn trainable(store: &'a ParamStore) -> Self {
        Self { store, trainable: true }
    }

    /// Parameters are recorded as constants and never receive gradients.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self { store, trainable: false }
    }

    pub fn var(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        let t = self.store.get(name)?;
        Ok(if self.trainable { tape.param(name, t) } else { tape.constant(t.clone()) })
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }
}

/// Parameter initialisation rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    HeNormal { fan_in: usize },
    Const(f64),
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Every parameter draws from its own stream keyed by (seed, name), so adding
/// or removing a head leaves the other parameters untouched.
pub fn init_tensor(seed: u64, name: &str, shape: &[usize], init: Init) -> Tensor {
    match init {
        Init::Const(v) => Tensor::full(shape, v),
        Init::HeNormal { fan_in } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(name));
            let std = (2.0 / fan_in.max(1) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let n = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
            Tensor::new(shape, data).expect("finite init")
        }
    }
}
