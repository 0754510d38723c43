//! Minimal reverse-mode automatic differentiation over `ndarray` at f64.
//!
//! A [`Tape`] records the forward computation as a flat graph of nodes; calling
//! [`Tape::backward`] on a scalar root returns gradients for every leaf. The
//! op set is exactly what the networks in this crate need: broadcast
//! arithmetic, dense/conv/transpose-conv layers, the pooling variants used by
//! the attentive filters, and the stable softmax/log primitives behind the
//! loss functions.
//!
//! Everything is f64 and single-threaded so gradient checks against central
//! finite differences hold tightly and runs are bit-reproducible.

mod conv;
mod ops;

pub mod adam;
pub mod fd;
pub mod init;
pub mod layers;
pub mod params;

#[cfg(test)]
mod grad_tests;

pub use adam::Adam;
pub use params::ParamStore;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use ops::Op;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node {
    pub value: ArrayD<f64>,
    pub parents: Vec<usize>,
    pub op: Op,
}

/// Records a forward computation; dropped after each step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients with respect to every node of a tape, indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of the given shape when the node is
    /// unreachable from the backward root.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> ArrayD<f64> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        *val.iter().next().unwrap()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: ArrayD<f64>, parents: Vec<usize>, op: Op) -> Var {
        self.nodes.push(Node { value, parents, op });
        Var(self.nodes.len() - 1)
    }

    /// Insert an input or parameter node.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, vec![], Op::Leaf)
    }

    /// Insert a value that never receives gradient (a detached constant).
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, vec![], Op::Leaf)
    }

    /// Re-insert the value of `v` as a constant: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Reverse pass from a scalar root. Returns gradients for every node that
    /// influences the root.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        let root_val = &self.nodes[root.0].value;
        if root_val.len() != 1 {
            return Err(Error::shape(format!(
                "backward root must be scalar, got shape {:?}",
                root_val.shape()
            )));
        }
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::ones(root_val.raw_dim()));

        for i in (0..=root.0).rev() {
            let upstream = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            if node.parents.is_empty() {
                grads[i] = Some(upstream);
                continue;
            }
            let parent_grads = ops::backward(self, node, &upstream)?;
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads.into_iter()) {
                match &mut grads[*p] {
                    Some(acc) => *acc += &g,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Grads { grads })
    }
}
