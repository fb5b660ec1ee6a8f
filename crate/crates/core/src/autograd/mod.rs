//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every op appends a node holding its value and a
//! closure mapping the output gradient to parent gradients. Graphs are built
//! fresh for each forward pass and dropped afterwards.

pub mod kernels;
mod ops;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use kernels::Window;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps the output gradient and parent values to parent gradients. `needs`
/// flags which parents require a gradient; the rest may be returned as `None`.
type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked (parameters, probed inputs).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push<F>(&mut self, value: Tensor<T>, parents: Vec<Var>, backward: F) -> Var
    where
        F: Fn(&Tensor<T>, &[&Tensor<T>], &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of the scalar `root` with respect to every tracked node.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            let Some(f) = &node.backward else { continue };
            let Some(g) = grads[id].take() else { continue };
            let parent_vals: Vec<&Tensor<T>> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let pgrads = f(&g, &parent_vals, &needs);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p.0].value.shape(), "grad shape for node {}", p.0);
                match &mut grads[p.0] {
                    Some(acc) => acc.accumulate(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Output of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when no gradient reached it.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}
