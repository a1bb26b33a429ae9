//! Named parameter containers and their binding into a [`Graph`].

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn from_index(i: usize) -> Self {
        ParamId(i)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Float> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Insert every parameter into `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect(),
        }
    }

    /// Replace the values of the named entries in `other` that start with
    /// `prefix`. Every such entry must exist here with the same shape.
    pub fn load_matching(&mut self, other: &ParamStore<F>, prefix: &str) -> Result<usize> {
        let mut problems = Vec::new();
        let mut updates = Vec::new();
        for (name, t) in other.iter().filter(|(n, _)| n.starts_with(prefix)) {
            match self.find(name) {
                None => problems.push(format!("{name}: unknown parameter")),
                Some(id) if self.get(id).shape() != t.shape() => problems.push(format!(
                    "{name}: shape {:?} != expected {:?}",
                    t.shape(),
                    self.get(id).shape()
                )),
                Some(id) => updates.push((id, t.clone())),
            }
        }
        if !problems.is_empty() {
            return Err(Error::ParamMismatch(problems));
        }
        let n = updates.len();
        for (id, t) in updates {
            self.tensors[id.0] = t;
        }
        Ok(n)
    }

    /// Replace every parameter by name; names and shapes must match exactly.
    pub fn set_all(&mut self, other: &ParamStore<F>) -> Result<()> {
        let mut problems = Vec::new();
        for name in &self.names {
            if other.find(name).is_none() {
                problems.push(format!("{name}: missing"));
            }
        }
        for name in &other.names {
            if self.find(name).is_none() {
                problems.push(format!("{name}: unexpected"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::ParamMismatch(problems));
        }
        self.load_matching(other, "").map(|_| ())
    }

    /// FNV-1a over names, shapes and the little-endian bytes of every value.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        for (name, t) in self.iter() {
            h.write(name.as_bytes());
            for &d in t.shape() {
                h.write(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.write(&v.as_f64().to_le_bytes());
            }
        }
        h.0
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

/// Graph variables of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Move this store's gradients out of `grads`, in parameter order.
    pub fn take_grads<F: Float>(&self, grads: &mut Gradients<F>) -> Vec<Option<Tensor<F>>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

/// Derive an independent stream seed from a run seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Fnv::new();
    h.write(&seed.to_le_bytes());
    h.write(label.as_bytes());
    // splitmix64 finalizer
    let mut z = h.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Allocates named, randomly initialized parameters for one network.
pub struct ParamBuilder<F> {
    store: ParamStore<F>,
    rng: ChaCha8Rng,
    scope: Vec<String>,
}

pub const LEAKY_SLOPE: f64 = 0.2;

impl<F: Float> ParamBuilder<F> {
    pub fn new(seed: u64, label: &str) -> Self {
        ParamBuilder {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, label)),
            scope: Vec::new(),
        }
    }

    pub fn push_scope(&mut self, name: impl ToString) {
        self.scope.push(name.to_string());
    }

    pub fn pop_scope(&mut self) {
        self.scope.pop();
    }

    fn full_name(&self, name: &str) -> String {
        let mut s = self.scope.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(name);
        s
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Zero-mean normal tensor with the given standard deviation.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            F::of(z * std)
        });
        let full = self.full_name(name);
        self.store.push(full, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let full = self.full_name(name);
        self.store.push(full, Tensor::full(shape, F::of(value)))
    }

    pub fn finish(self) -> ParamStore<F> {
        self.store
    }
}

/// He-style standard deviation for a leaky-ReLU network.
pub fn he_std(fan_in: usize) -> f64 {
    libm::sqrt(2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in as f64))
}
