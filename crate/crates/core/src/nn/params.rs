//! Named parameter storage and the matching gradient buffers.

use rand::Rng as _;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Handle to one tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub trainable: bool,
}

/// Ordered collection of named weight tensors. Insertion order is the
/// serialization order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(Error::DuplicateName(name));
        }
        self.params.push(Param { name, value, trainable });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Adds a tensor drawn uniformly from `[-bound, bound]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut Rng,
    ) -> Result<ParamId> {
        let value = Tensor::from_fn(shape, |_| F::lit(rng.random_range(-bound..=bound)));
        self.add(name, value, true)
    }

    pub fn add_full(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, F::lit(value)), true)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    /// Sets the trainable flag of every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
        }
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), trainable: p.trainable })
                .collect(),
        }
    }

    /// Overwrites values from `other`, matching by name. Shapes must agree and
    /// both stores must hold the same set of names.
    pub fn load_from(&mut self, other: &ParamStore<F>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::shape(format!(
                "parameter count mismatch: model has {}, source has {}",
                self.len(),
                other.len()
            )));
        }
        for src in &other.params {
            let id = self
                .find(&src.name)
                .ok_or_else(|| Error::shape(format!("unknown parameter `{}`", src.name)))?;
            let dst = &mut self.params[id.0];
            if dst.value.shape() != src.value.shape() {
                return Err(Error::shape(format!(
                    "parameter `{}`: model shape {:?}, source shape {:?}",
                    src.name,
                    dst.value.shape(),
                    src.value.shape()
                )));
            }
        }
        for src in &other.params {
            let id = self.find(&src.name).expect("checked above");
            let dst = &mut self.params[id.0];
            dst.value = src.value.clone();
            dst.trainable = src.trainable;
        }
        Ok(())
    }
}

/// Gradient buffers parallel to a [`ParamStore`]. Backward passes accumulate
/// into these with `+=`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<F> {
    tensors: Vec<Tensor<F>>,
}

impl<F: Real> Grads<F> {
    pub fn zeros_like(store: &ParamStore<F>) -> Self {
        Self { tensors: store.iter().map(|p| Tensor::zeros(p.value.shape())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    /// Mutable access to the raw data of one gradient.
    pub fn slot(&mut self, id: ParamId) -> &mut [F] {
        self.tensors[id.0].data_mut()
    }

    /// Disjoint mutable access to two gradients.
    pub fn pair(&mut self, a: ParamId, b: ParamId) -> (&mut [F], &mut [F]) {
        assert_ne!(a, b, "gradient slots must differ");
        if a.0 < b.0 {
            let (lo, hi) = self.tensors.split_at_mut(b.0);
            (lo[a.0].data_mut(), hi[0].data_mut())
        } else {
            let (lo, hi) = self.tensors.split_at_mut(a.0);
            (hi[0].data_mut(), lo[b.0].data_mut())
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<F>> {
        self.tensors.iter()
    }

    pub fn zero(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.fill(F::zero()));
    }

    pub fn scale(&mut self, factor: F) {
        self.tensors.iter_mut().for_each(|t| t.scale(factor));
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}
