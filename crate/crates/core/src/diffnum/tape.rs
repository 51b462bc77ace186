use std::collections::HashMap;

use super::{Backend, DiffError, Prim, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

struct Node {
    value: Tensor,
    // None for leaves.
    op: Option<Prim>,
    parents: Vec<NodeId>,
}

/// Records primitives in construction order; construction order is a
/// topological order of the graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
    param_index: HashMap<String, NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// An input leaf whose gradient can be read back with [`Grads::wrt`].
    pub fn var(&mut self, t: Tensor) -> NodeId {
        self.push(t, None, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    fn push(&mut self, value: Tensor, op: Option<Prim>, parents: Vec<NodeId>) -> NodeId {
        self.nodes.push(Node { value, op, parents });
        NodeId(self.nodes.len() - 1)
    }

    pub fn backward(&self, root: NodeId) -> Result<Grads> {
        let root_val = &self.nodes[root.0].value;
        if root_val.len() != 1 {
            return Err(DiffError::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(root_val.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let parent_grads = op.vjp(&inputs, &node.value, &g);
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Grads { grads, params: self.params.clone(), shapes: self.leaf_shapes(root) })
    }

    fn leaf_shapes(&self, root: NodeId) -> Vec<Vec<usize>> {
        self.nodes[..=root.0]
            .iter()
            .map(|n| if n.op.is_none() { n.value.shape().to_vec() } else { Vec::new() })
            .collect()
    }
}

impl Backend for Tape {
    type T = NodeId;

    fn apply(&mut self, prim: Prim, inputs: &[&NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = prim.forward(&vals)?;
        let parents = inputs.iter().map(|id| **id).collect();
        Ok(self.push(value, Some(prim), parents))
    }

    fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, None, Vec::new())
    }

    fn param(&mut self, name: &str, init: impl FnOnce() -> Tensor) -> NodeId {
        if let Some(id) = self.param_index.get(name) {
            return *id;
        }
        let id = self.push(init(), None, Vec::new());
        self.params.push((name.to_string(), id));
        self.param_index.insert(name.to_string(), id);
        id
    }

    fn value<'a>(&'a self, x: &'a NodeId) -> &'a Tensor {
        &self.nodes[x.0].value
    }
}

/// Gradients of one scalar root with respect to every leaf before it.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, NodeId)>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    /// Gradient with respect to a leaf; zeros when the root does not depend on it.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        match self.grads.get(id.0) {
            Some(Some(g)) => g.clone(),
            _ => Tensor::zeros(self.shapes.get(id.0).map(|s| s.as_slice()).unwrap_or(&[])),
        }
    }

    pub fn param(&self, name: &str) -> Option<Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, id)| self.wrt(*id))
    }

    /// `(name, gradient)` for every named parameter leaf on the tape.
    pub fn named(&self) -> impl Iterator<Item = (&str, Tensor)> + '_ {
        self.params.iter().map(|(n, id)| (n.as_str(), self.wrt(*id)))
    }
}
