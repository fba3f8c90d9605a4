use std::collections::BTreeMap;

use super::{Graph, Tensor, TensorError, Var};

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.params.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Copies every parameter whose name starts with `prefix` from `other`.
    pub fn copy_prefix(&mut self, other: &ParamStore, prefix: &str) -> usize {
        let mut copied = 0;
        for (name, t) in other.iter().filter(|(n, _)| n.starts_with(prefix)) {
            self.params.insert(name.clone(), t.clone());
            copied += 1;
        }
        copied
    }

    /// Adds every parameter to `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(n, t)| (n.clone(), g.param(t.clone())))
                .collect(),
        }
    }

    /// Adds every parameter to `g` as a constant (inference / frozen use).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(n, t)| (n.clone(), g.constant(t.clone())))
                .collect(),
        }
    }
}

/// Parameters placed on a particular graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var, TensorError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    /// Gradients after `g.backward`, keyed by parameter name.
    pub fn grads(&self, g: &Graph) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(n, &v)| g.grad(v).map(|t| (n.clone(), t.clone())))
            .collect()
    }
}
