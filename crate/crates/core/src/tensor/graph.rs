use super::Tensor;
use crate::error::{shape_err, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Vector-Jacobian product of one recorded operation.
///
/// `inputs` are the parent values in the order they were recorded; the
/// returned vector holds one optional gradient per parent.
pub trait Backward: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    parents: Vec<Var>,
    op: Option<Box<dyn Backward>>,
}

/// Append-only tape of executed operations.
///
/// Nodes are stored in execution order, which is a topological order, so the
/// backward pass is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Records a leaf treated as data.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            parents: Vec::new(),
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Clears every stored gradient.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub(crate) fn push(&mut self, value: Tensor, parents: &[Var], op: impl Backward + 'static) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            parents: parents.to_vec(),
            op: requires_grad.then(|| Box::new(op) as Box<dyn Backward>),
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`, accumulating into every leaf that
    /// requires a gradient. Intermediate gradients are released once
    /// propagated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            shape_err!("backward needs a scalar loss, got shape {shape:?}");
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor::ones(&shape));
        for i in (0..=loss.0).rev() {
            if self.nodes[i].op.is_none() {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let node = &self.nodes[i];
            let inputs: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let op = node.op.as_ref().expect("checked above");
            let parent_grads = op.backward(&inputs, &node.value, &grad);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", op.name());
            let parents = node.parents.clone();
            let name = op.name();
            for (p, g) in parents.into_iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                let target = &mut self.nodes[p.0];
                if !target.requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), target.value.shape(), "grad shape from {name}");
                match &mut target.grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}
