use crate::{Grads, Graph, Scalar, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Copies every parameter into `graph` as a trainable leaf, except the
    /// ones for which `frozen` returns true, which become constants.
    pub fn bind_with(&self, graph: &mut Graph<S>, frozen: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| {
                if frozen(n) {
                    graph.constant(t.clone())
                } else {
                    graph.param(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn bind(&self, graph: &mut Graph<S>) -> Bound {
        self.bind_with(graph, |_| false)
    }

    /// Parameter gradients in store order; `None` for frozen or unused ones.
    pub fn collect_grads(&self, grads: &mut Grads<S>, bound: &Bound) -> Vec<Option<Tensor<S>>> {
        bound.vars.iter().map(|&v| grads.take(v)).collect()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Graph leaves for one forward pass, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
