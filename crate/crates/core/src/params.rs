//! Named parameter tensors and their binding onto a computation graph.

use std::collections::BTreeMap;

use ndiff::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on a duplicate name, which is a
    /// construction bug rather than a runtime condition.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        let id = ParamId(self.tensors.len());
        assert!(
            self.by_name.insert(name.clone(), id).is_none(),
            "duplicate parameter `{name}`"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// One graph leaf per parameter, in id order.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Bindings {
        Bindings(
            self.tensors
                .iter()
                .map(|t| {
                    if trainable {
                        graph.param(t.clone())
                    } else {
                        graph.constant(t.clone())
                    }
                })
                .collect(),
        )
    }
}

/// Graph variables for every parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bindings(pub Vec<Var>);

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl std::ops::Index<ParamId> for Bindings {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}
