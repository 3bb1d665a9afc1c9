//! Named parameter storage and initialization.

use std::collections::HashMap;
use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Glorot normal: `N(0, 2 / (fan_in + fan_out))`.
    Xavier,
    Zeros,
    Constant(f64),
}

/// Ordered set of named tensors. Order is insertion order, which makes
/// checkpoints and optimizer state line up deterministically.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    lookup: HashMap<String, usize>,
}

/// Fan-in and fan-out of a kernel shaped `(a, b, kh, kw)`.
fn fans(shape: Shape) -> (usize, usize) {
    let field = shape.h * shape.w;
    (shape.c * field, shape.n * field)
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(
            !self.lookup.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Create and initialize a parameter. `Xavier` treats the shape as a
    /// convolution kernel `(out, in, kh, kw)` (the fan formula is symmetric,
    /// so transposed kernels work unchanged).
    pub fn create(
        &mut self,
        name: impl Into<String>,
        shape: Shape,
        init: Init,
        rng: &mut impl Rng,
    ) -> ParamId {
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Constant(v) => Tensor::full(shape, S::of(v)),
            Init::Xavier => {
                let (fan_in, fan_out) = fans(shape);
                let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("finite std");
                let data = (0..shape.numel())
                    .map(|_| S::of(dist.sample(rng)))
                    .collect();
                Tensor::from_vec(shape, data).expect("shape")
            }
        };
        self.insert(name, t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<S>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<S>> {
        self.tensors.iter_mut()
    }

    /// Replace a value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let have = self.tensors[id.0].shape();
        if have != value.shape() {
            return Err(Error::shapes("ParamStore::set", have, value.shape()));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            lookup: self.lookup.clone(),
        }
    }

    /// Order-sensitive FNV-1a hash over names and raw value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (name, t) in self.iter() {
            name.bytes().for_each(&mut eat);
            for v in t.data() {
                v.f64()
                    .to_bits()
                    .to_le_bytes()
                    .into_iter()
                    .for_each(&mut eat);
            }
        }
        h
    }
}

/// Parameters of a store recorded on a graph, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wrap graph values as parameters, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl<S: Real> Graph<S> {
    /// Record every parameter as a leaf. Frozen parameters (`trainable =
    /// false`) still propagate gradients to upstream inputs but never receive
    /// any themselves.
    pub fn bind(&mut self, store: &ParamStore<S>, trainable: bool) -> Bound {
        Bound {
            vars: store
                .tensors
                .iter()
                .map(|t| self.leaf(t.clone(), trainable))
                .collect(),
        }
    }

    /// Gradients of bound parameters, zero-filled where none reached them.
    pub fn param_grads(&self, store: &ParamStore<S>, bound: &Bound) -> Vec<Tensor<S>> {
        store
            .ids()
            .map(|id| {
                self.grad(bound[id])
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn xavier_std_matches_fans() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let id = store.create("w", Shape::new(64, 32, 3, 3), Init::Xavier, &mut rng);
        let d = store.get(id).data();
        let var = d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64;
        let want = 2.0 / ((32 * 9 + 64 * 9) as f64);
        assert!((var / want - 1.0).abs() < 0.05, "{var} vs {want}");
    }

    #[test]
    fn lookup_and_checksum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        store.create("a", Shape::new(2, 2, 1, 1), Init::Xavier, &mut rng);
        store.create("b", Shape::new(1, 3, 1, 1), Init::Constant(0.5), &mut rng);
        assert_eq!(store.num_scalars(), 7);
        assert_eq!(store.by_name("b").unwrap().data(), &[0.5; 3]);
        let before = store.checksum();
        store
            .set("b", Tensor::full(Shape::new(1, 3, 1, 1), 0.25))
            .unwrap();
        assert_ne!(before, store.checksum());
        assert!(store
            .set("b", Tensor::zeros(Shape::new(1, 1, 1, 1)))
            .is_err());
    }
}
