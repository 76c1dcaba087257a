use std::collections::HashMap;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Named parameter tensors with a stable iteration order (insertion order).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = tensor,
            None => {
                self.index.insert(name.clone(), self.tensors.len());
                self.names.push(name);
                self.tensors.push(tensor);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names
            .iter()
            .map(|s| s.as_str())
            .zip(self.tensors.iter_mut())
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Insert every parameter into `graph` as a leaf; the binding maps names
    /// to the created node ids for the duration of one forward/backward pass.
    pub fn bind(&self, graph: &mut Graph) -> ParamBinding {
        let mut ids = HashMap::with_capacity(self.names.len());
        for (name, tensor) in self.iter() {
            ids.insert(name.to_string(), graph.leaf(tensor.clone()));
        }
        ParamBinding { ids }
    }
}

/// Name -> node id map for one bound forward pass.
pub struct ParamBinding {
    ids: HashMap<String, NodeId>,
}

impl ParamBinding {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn try_id(&self, name: &str) -> Option<NodeId> {
        self.ids.get(name).copied()
    }

    /// Gradients for every bound parameter after `graph.backward`, in the
    /// store's iteration order. Unreached parameters report zeros.
    pub fn gradients(&self, graph: &Graph, store: &ParamStore) -> Result<Vec<Tensor>> {
        let mut grads = Vec::with_capacity(store.len());
        for name in store.names() {
            let id = self.id(name);
            let g = graph
                .grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(graph.value(id).shape()));
            grads.push(g);
        }
        Ok(grads)
    }
}
