use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Value};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// Frozen parameters are skipped by the optimizer.
    pub frozen: bool,
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the seed.
    let mut h: u64 = 0xcbf29ce484222325 ^ seed.wrapping_mul(0x9e3779b97f4a7c15);
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            frozen: false,
        });
        Ok(ParamId(id))
    }

    /// Inserts a `[fan_in x fan_out]` weight drawn uniformly from
    /// `±sqrt(6 / (fan_in + fan_out))`. The stream depends only on `(seed, name)`.
    pub fn insert_glorot(&mut self, name: &str, fan_in: usize, fan_out: usize, seed: u64) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, Tensor::matrix(fan_in, fan_out, data)?)
    }

    pub fn insert_zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| &self.params[id.0])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.id(name).map(|id| &mut self.params[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Sets every parameter whose name starts with `prefix` to zero and marks it frozen.
    pub fn zero_and_freeze(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            p.frozen = true;
            n += 1;
        }
        n
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Lazily places parameters on a tape for one forward pass.
#[derive(Debug)]
pub struct Bindings<'a> {
    store: &'a ParamStore,
    values: Vec<Option<Value>>,
    track: bool,
}

impl<'a> Bindings<'a> {
    /// With `track == false` parameters enter as constants (inference only).
    pub fn new(store: &'a ParamStore, track: bool) -> Self {
        Bindings {
            store,
            values: vec![None; store.len()],
            track,
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn get(&mut self, tape: &mut Tape, id: ParamId) -> Value {
        if let Some(v) = self.values[id.0] {
            return v;
        }
        let v = tape.leaf(self.store.get(id).value.clone(), self.track);
        self.values[id.0] = Some(v);
        v
    }

    pub fn named(&mut self, tape: &mut Tape, name: &str) -> Result<Value> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?;
        Ok(self.get(tape, id))
    }

    /// Gradients in store order; unused parameters get zeros.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.store
            .iter()
            .zip(&self.values)
            .map(|(p, v)| {
                v.and_then(|v| tape.grad(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()))
            })
            .collect()
    }
}
