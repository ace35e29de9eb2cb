//! Named, ordered parameter storage.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]. Each forward pass binds
//! the whole store onto a fresh [`Graph`] and copies gradients back after
//! the backward sweep.

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<F: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

/// Graph nodes of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bindings {
    nodes: Vec<NodeId>,
}

impl Bindings {
    /// Nodes listed in [`ParamId`] order, e.g. leaves created by a caller.
    pub fn from_nodes(nodes: Vec<NodeId>) -> Self {
        Self { nodes }
    }

    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Registers a trainable tensor under a dotted name.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn bind(&self, g: &mut Graph<F>) -> Bindings {
        let nodes = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| g.param(n, t.clone()))
            .collect();
        Bindings { nodes }
    }

    /// Adds the graph's gradients for bound parameters into the store.
    pub fn accumulate_grads(&mut self, g: &Graph<F>, bindings: &Bindings) {
        for (t, &node) in self.tensors.iter_mut().zip(&bindings.nodes) {
            if let Some(grad) = g.grad(node) {
                t.accumulate_grad(grad);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Copies values from `other`, matching by name and shape.
    pub fn copy_values_from(&mut self, other: &ParamStore<F>) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = other
                .find(name)
                .map(|id| other.get(id))
                .ok_or_else(|| Error::Parameter {
                    name: name.clone(),
                    detail: "missing from source".into(),
                })?;
            if src.shape() != t.shape() {
                return Err(Error::Parameter {
                    name: name.clone(),
                    detail: format!("shape {:?} vs {:?}", src.shape(), t.shape()),
                });
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Same parameters in another element type.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for (n, t) in self.iter() {
            out.add(n, t.cast());
        }
        out
    }
}
