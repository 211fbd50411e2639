use std::collections::HashMap;
use std::ops::Index;

use super::{Element, Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Stable handle to a named parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An ordered collection of named parameter tensors.
///
/// Insertion order is the canonical enumeration order used by checkpoints
/// and optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.lookup.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            lookup: self.lookup.clone(),
        }
    }

    /// Replaces the tensor behind `id`, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::shape(
                "param_set",
                format!(
                    "{}: expected {:?}, got {:?}",
                    self.names[id.0],
                    self.values[id.0].shape(),
                    value.shape()
                ),
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }
}

/// Tape variables for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Index<ParamId> for Binding {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Binding {
    /// Wraps variables given in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Binding { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Pulls each parameter's gradient out of `grads`, zero-filled when unreached.
    pub fn gradients<T: Element>(&self, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|&v| grads.take_or_zero(v)).collect()
    }
}

impl<T: Element> Tape<T> {
    /// Records every parameter as a differentiable leaf.
    pub fn bind(&mut self, store: &ParamStore<T>) -> Binding {
        Binding {
            vars: store.values.iter().map(|v| self.variable(v.clone())).collect(),
        }
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen(&mut self, store: &ParamStore<T>) -> Binding {
        Binding {
            vars: store.values.iter().map(|v| self.constant(v.clone())).collect(),
        }
    }
}
