//! Named parameter registry shared by layers, the optimizer and checkpoints.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]; a forward pass binds the
//! store onto a tape once with [`ParamStore::bind`], after which layers look
//! up their leaves through the returned [`Bound`].

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
struct Entry<T> {
    name: String,
    value: Arc<Tensor<T>>,
    decay: bool,
}

#[derive(Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    by_name: HashMap<String, usize>,
}

/// How freshly registered weights are filled.
pub enum Init<'r, R: Rng> {
    /// Every weight and bias zero; norm gains and the SSM state parameters
    /// keep their structural values.
    Zero,
    Random(&'r mut R),
}

impl<R: Rng> Init<'_, R> {
    pub fn is_zero(&self) -> bool {
        matches!(self, Init::Zero)
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, or zeros.
    pub fn fan_in<T: Real>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        match self {
            Init::Zero => Tensor::zeros(shape),
            Init::Random(rng) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                Tensor::uniform(shape, -bound, bound, *rng)
            }
        }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> Option<f64> {
        match self {
            Init::Zero => None,
            Init::Random(rng) => Some(rng.gen_range(lo..hi)),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a tensor. `decay` marks it for weight decay.
    ///
    /// Panics on a duplicate name; names are assigned by model construction.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            value: Arc::new(value),
            decay,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.entries[id.0].decay
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::shape(e.value.shape(), value.shape(), "parameter update"));
        }
        e.value = Arc::new(value);
        Ok(())
    }

    /// In-place access for the optimizer; copies only if a tape still holds
    /// the previous value.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    /// Total scalar count over all registered tensors.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.entries.iter().map(|e| (*e.value).clone()).collect()
    }

    /// Converts every tensor to another precision, keeping names and flags.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: Arc::new(e.value.cast()),
                    decay: e.decay,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, requires_grad: bool) -> Bound<'t, T> {
        Bound {
            vars: self.entries.iter().map(|e| tape.leaf_shared(e.value.clone(), requires_grad)).collect(),
        }
    }
}

/// Parameters placed on one tape, indexed by [`ParamId`].
pub struct Bound<'t, T: Real> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    /// Wraps leaves created elsewhere, in registry order.
    pub fn from_vars(vars: &[Var<'t, T>]) -> Self {
        Self { vars: vars.to_vec() }
    }

    pub fn get(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    /// Gradients after `backward`, in registry order; `None` for parameters
    /// the loss does not reach.
    pub fn grads(&self) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|v| v.grad()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_exposes_values_and_collects_grads() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_f64([2], &[1.0, 2.0]).unwrap(), true);
        let unused = store.add("unused", Tensor::zeros([3]), false);
        let tape = Tape::new();
        let p = store.bind(&tape, true);
        let loss = p.get(w).mul(p.get(w)).unwrap().sum();
        tape.backward(loss).unwrap();
        let grads = p.grads();
        assert_eq!(grads[w.index()].as_ref().unwrap().data(), &[2.0, 4.0]);
        assert!(grads[unused.index()].is_none());
        assert_eq!(store.numel(), 5);
        assert_eq!(store.id("unused"), Some(unused));
    }

    #[test]
    fn set_rejects_shape_change() {
        let mut store = ParamStore::<f32>::new();
        let w = store.add("w", Tensor::zeros([2, 2]), true);
        assert!(store.set(w, Tensor::zeros([4])).is_err());
    }
}
