use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward rule sees: the upstream gradient, the forward inputs and
/// output, and which inputs actually need a gradient.
pub struct BackwardArgs<'a, T> {
    pub grad: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub needs: Vec<bool>,
}

type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    op: &'static str,
    value: Tensor<T>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// A dynamically recorded computation. Nodes are appended in execution
/// order, so the node list is already topologically sorted.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Records a leaf that backward will produce a gradient for.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: "leaf",
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Appends an operation result. Non-finite outputs are rejected here so
    /// a NaN never travels silently through the graph.
    pub fn record<F>(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[Var],
        backward: F,
    ) -> Result<Var>
    where
        F: Fn(&BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        if let Some(index) = value.first_non_finite() {
            return Err(Error::NonFinite { op, index });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            parents: parents.to_vec(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<T>),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Runs reverse-mode differentiation from a scalar root, consuming the tape.
    pub fn backward(self, root: Var) -> Result<Gradients<T>> {
        let root_value = &self.nodes[root.0].value;
        if root_value.numel() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(root_value.shape().to_vec()));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let args = BackwardArgs {
                grad: &grad,
                inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                output: &node.value,
                needs: node
                    .parents
                    .iter()
                    .map(|p| self.nodes[p.0].requires_grad)
                    .collect(),
            };
            let parent_grads = backward(&args);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", node.op);
            for (parent, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    g.shape(),
                    self.nodes[parent.0].value.shape(),
                    "gradient shape from {}",
                    node.op
                );
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let leaf_grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| if n.backward.is_none() { g } else { None })
            .collect();
        Ok(Gradients {
            grads: leaf_grads,
            shapes,
        })
    }
}

/// Gradients of leaf variables produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros if backward never reached it.
    pub fn take_or_zero(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}
