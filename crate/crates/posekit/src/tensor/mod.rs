//! Reverse-mode automatic differentiation over dynamic-dimensional arrays.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value and a backward closure. [`Tape::backward`] walks the recording
//! in reverse and accumulates gradients for every grad-tracked leaf. Nodes
//! are appended in evaluation order, so the node list is already a
//! topological order of the graph.
//!
//! The engine is deliberately small: array-level ops only (no per-element
//! graph nodes), single-threaded, and generic over [`Scalar`] so the same
//! graph code runs in `f32` for speed and `f64` for finite-difference
//! verification.

mod elementwise;
#[cfg(test)]
mod gradtests;
mod linalg;
mod reduce;
mod shape;
mod vision;

pub use linalg::conv_out_len;

use ndarray::{ArrayD, IxDyn};

use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
/// The `Default` value points at node 0 and is only a placeholder for
/// array initialization, not a usable handle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Var(pub(crate) usize);

/// Computes gradient contributions for each parent given the upstream
/// gradient of the node's output.
pub(crate) type BackwardFn<S> = Box<dyn Fn(&Tape<S>, &ArrayD<S>) -> Vec<(Var, ArrayD<S>)>>;

struct Node<S: Scalar> {
    value: ArrayD<S>,
    /// True when the node depends on at least one grad-tracked leaf.
    needs_grad: bool,
    backward: Option<BackwardFn<S>>,
}

/// Recording of one forward computation.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a value that does not require gradients.
    pub fn constant(&mut self, value: ArrayD<S>) -> Var {
        self.push_node(value, false, None)
    }

    /// Records a grad-tracked input. Gradients of leaves survive
    /// [`Tape::backward`] and can be read from [`Gradients`].
    pub fn leaf(&mut self, value: ArrayD<S>) -> Var {
        self.push_node(value, true, None)
    }

    /// Convenience constructor for a 0-arity scalar constant of shape `[1]`.
    pub fn scalar(&mut self, v: S) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    pub fn value(&self, v: Var) -> &ArrayD<S> {
        &self.nodes[v.0].value
    }

    /// Extracts the single element of a one-element node.
    pub fn scalar_value(&self, v: Var) -> S {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar_value on node with {} elems", val.len());
        *val.iter().next().expect("non-empty")
    }

    pub(crate) fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Index the next pushed node will get. Lets ops reference their own
    /// output value inside the backward closure.
    pub(crate) fn next_id(&self) -> Var {
        Var(self.nodes.len())
    }

    pub(crate) fn push_node(
        &mut self,
        value: ArrayD<S>,
        needs_grad: bool,
        backward: Option<BackwardFn<S>>,
    ) -> Var {
        debug_assert!(backward.is_none() || needs_grad);
        let id = Var(self.nodes.len());
        self.nodes.push(Node {
            value,
            needs_grad,
            backward,
        });
        id
    }

    /// Stops gradient flow: the result is a constant copy of `a`.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.constant(v)
    }

    /// Runs the reverse pass from a one-element root node and returns the
    /// accumulated gradients. Only leaf gradients are retained; gradients of
    /// interior nodes are dropped once consumed.
    pub fn backward(&self, root: Var) -> Gradients<S> {
        assert_eq!(
            self.value(root).len(),
            1,
            "backward root must hold exactly one element"
        );
        let mut grads: Vec<Option<ArrayD<S>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(ArrayD::from_elem(self.value(root).raw_dim(), S::one()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            for (parent, contrib) in backward(self, &g) {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                debug_assert_eq!(
                    contrib.shape(),
                    self.nodes[parent.0].value.shape(),
                    "gradient shape mismatch for node {}",
                    parent.0
                );
                match &mut grads[parent.0] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the root with respect to `v`, if `v` is a grad-tracked
    /// leaf that the root depends on.
    pub fn get(&self, v: Var) -> Option<&ArrayD<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Removes and returns the gradient for `v`.
    pub fn take(&mut self, v: Var) -> Option<ArrayD<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn backward_of_sum_of_two_leaves_is_one_each() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(arr1(&[1.0, 2.0]).into_dyn());
        let b = t.leaf(arr1(&[3.0, 4.0]).into_dyn());
        let s = t.add(a, b);
        let total = t.sum_all(s);
        let grads = t.backward(total);
        assert_eq!(grads.get(a).unwrap(), &arr1(&[1.0, 1.0]).into_dyn());
        assert_eq!(grads.get(b).unwrap(), &arr1(&[1.0, 1.0]).into_dyn());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(arr1(&[2.0]).into_dyn());
        let c = t.constant(arr1(&[5.0]).into_dyn());
        let p = t.mul(a, c);
        let total = t.sum_all(p);
        let grads = t.backward(total);
        assert_eq!(grads.get(a).unwrap(), &arr1(&[5.0]).into_dyn());
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn gradient_accumulates_over_shared_subexpressions() {
        // f(a) = a*a + a  =>  df/da = 2a + 1
        let mut t = Tape::<f64>::new();
        let a = t.leaf(arr1(&[3.0]).into_dyn());
        let sq = t.mul(a, a);
        let f = t.add(sq, a);
        let total = t.sum_all(f);
        let grads = t.backward(total);
        assert_eq!(grads.get(a).unwrap(), &arr1(&[7.0]).into_dyn());
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(arr1(&[2.0]).into_dyn());
        let d = t.detach(a);
        let p = t.mul(a, d);
        let total = t.sum_all(p);
        let grads = t.backward(total);
        // d(a * stop(a))/da = stop(a) = 2, not 2a = 4.
        assert_eq!(grads.get(a).unwrap(), &arr1(&[2.0]).into_dyn());
    }

    #[test]
    #[should_panic(expected = "one element")]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(arr1(&[1.0, 2.0]).into_dyn());
        let _ = t.backward(a);
    }
}
