//! Named parameter storage and the per-step binding of parameters onto a graph.

use std::cell::RefCell;

use factorizer_tensor::{Gradients, Graph, Real, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether weight decay applies (false for norms, biases, embeddings).
    pub decay: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), value, decay });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::Structural(format!(
                "parameter `{}` has shape {:?}, replacement has {:?}",
                entry.name,
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}

/// Parameter initializer drawing from one seeded stream in construction order.
pub struct Init<'a, T: Real> {
    pub store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Real> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self { store, rng: rng::stream(seed, &[0x1417]) }
    }

    /// Weights uniform in `±1/√fan_in`.
    pub fn fan_in_uniform(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))?;
        Ok(self.store.add(name, t, true))
    }

    pub fn normal(&mut self, name: &str, shape: Vec<usize>, std: f64, decay: bool) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))?;
        Ok(self.store.add(name, t, decay))
    }

    pub fn constant(&mut self, name: &str, shape: Vec<usize>, value: f64) -> Result<ParamId> {
        Ok(self.store.add(name, Tensor::full(shape, T::lit(value))?, false))
    }
}

/// Factor matrices captured from NMF layers during a forward pass.
#[derive(Debug, Clone)]
pub struct ComponentRecord<T: Real> {
    /// One-based NMF layer index.
    pub layer: usize,
    /// `G` factors, `(B', N, R)`.
    pub factors: Tensor<T>,
    pub matricize: crate::matricize::MatricizeConfig,
    pub original_shape: [usize; 5],
}

/// Binds stored parameters onto one graph, lazily.
pub struct Ctx<'g, T: Real> {
    pub graph: &'g Graph<T>,
    store: &'g ParamStore<T>,
    bound: RefCell<Vec<Option<Var<'g, T>>>>,
    trainable: bool,
    /// Training step, folded into the NMF initialization seed.
    pub step: u64,
    probe: Option<RefCell<Vec<ComponentRecord<T>>>>,
}

impl<'g, T: Real> Ctx<'g, T> {
    pub fn new(graph: &'g Graph<T>, store: &'g ParamStore<T>, trainable: bool) -> Self {
        Self { graph, store, bound: RefCell::new(vec![None; store.len()]), trainable, step: 0, probe: None }
    }

    pub fn with_step(mut self, step: u64) -> Self {
        self.step = step;
        self
    }

    pub fn with_probe(mut self) -> Self {
        self.probe = Some(RefCell::new(Vec::new()));
        self
    }

    pub fn param(&self, id: ParamId) -> Var<'g, T> {
        let mut bound = self.bound.borrow_mut();
        if let Some(v) = bound[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.trainable { self.graph.param(value) } else { self.graph.constant(value) };
        bound[id.0] = Some(v);
        v
    }

    pub(crate) fn probing(&self) -> bool {
        self.probe.is_some()
    }

    pub(crate) fn record(&self, rec: ComponentRecord<T>) {
        if let Some(p) = &self.probe {
            p.borrow_mut().push(rec);
        }
    }

    pub fn take_components(&self) -> Vec<ComponentRecord<T>> {
        self.probe.as_ref().map(|p| std::mem::take(&mut *p.borrow_mut())).unwrap_or_default()
    }

    /// Gradients for every stored parameter; unused ones come back as zeros.
    pub fn collect_grads(&self, grads: &mut Gradients<T>) -> Result<Vec<Tensor<T>>> {
        let bound = self.bound.borrow();
        self.store
            .entries()
            .iter()
            .zip(bound.iter())
            .map(|(entry, var)| {
                let g = var.and_then(|v| grads.take(v));
                match g {
                    Some(g) => Ok(g),
                    None => Ok(Tensor::zeros(entry.value.shape().to_vec())?),
                }
            })
            .collect()
    }

    /// Gradients only for parameters that were actually used.
    pub fn used_params(&self) -> Vec<ParamId> {
        self.bound.borrow().iter().enumerate().filter(|(_, v)| v.is_some()).map(|(i, _)| ParamId(i)).collect()
    }
}
