//! Define-by-run reverse-mode autodiff over `ndarray` storage.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! topological order, so the backward sweep is a single reverse walk.
//! Leaves are either `constant` (no gradient) or `param` (gradient
//! accumulated). Everything is deterministic: no threading, fixed
//! accumulation order.

mod ops;
mod spatial;

use crate::scalar::Scalar;
use ndarray::ArrayD;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Per-parent gradient contributions returned by a backward closure.
type BackFn<F> = Box<dyn Fn(&ArrayD<F>, &[&ArrayD<F>], &ArrayD<F>) -> Vec<Option<ArrayD<F>>>>;

/// Repack into row-major order unless already there (no-op for the common case).
fn standardize<F: Scalar>(a: ArrayD<F>) -> ArrayD<F> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

struct Node<F: Scalar> {
    value: ArrayD<F>,
    parents: Vec<Var>,
    needs_grad: bool,
    backward: Option<BackFn<F>>,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

/// Gradients keyed by [`Var`], produced by [`Graph::backward`].
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the loss w.r.t. `v`, if one was accumulated.
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, vec![], false, None)
    }

    /// Leaf that accumulates a gradient during [`Graph::backward`].
    pub fn param(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, vec![], true, None)
    }

    /// 1-element constant.
    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(ArrayD::from_elem(ndarray::IxDyn(&[1]), F::cast(x)))
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant copy of `v`'s value: blocks gradient flow (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub(crate) fn push(
        &mut self,
        value: ArrayD<F>,
        parents: Vec<Var>,
        needs_grad: bool,
        backward: Option<BackFn<F>>,
    ) -> Var {
        // Stored values must be row-major so view-reshapes in later ops
        // never hit a layout mismatch (e.g. concatenate along an inner
        // axis yields an owned array with that axis outermost).
        let value = standardize(value);
        self.nodes.push(Node {
            value,
            parents,
            needs_grad,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn unary(
        &mut self,
        a: Var,
        value: ArrayD<F>,
        backward: BackFn<F>,
    ) -> Var {
        let needs = self.nodes[a.0].needs_grad;
        self.push(value, vec![a], needs, needs.then_some(backward))
    }

    pub(crate) fn binary(
        &mut self,
        a: Var,
        b: Var,
        value: ArrayD<F>,
        backward: BackFn<F>,
    ) -> Var {
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(value, vec![a, b], needs, needs.then_some(backward))
    }

    /// Reverse sweep from `loss` (any shape; seeded with ones).
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        let mut grads: Vec<Option<ArrayD<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(
            self.nodes[loss.0].value.raw_dim(),
            F::one(),
        ));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let (Some(back), Some(_)) = (node.backward.as_ref(), grads[i].as_ref()) else {
                continue;
            };
            let g = grads[i].take().expect("checked above");
            let parent_vals: Vec<&ArrayD<F>> = node
                .parents
                .iter()
                .map(|p| &self.nodes[p.0].value)
                .collect();
            let contributions = back(&g, &parent_vals, &node.value);
            debug_assert_eq!(contributions.len(), node.parents.len());
            for (p, c) in node.parents.iter().zip(contributions) {
                let Some(c) = c.map(standardize) else { continue };
                if !self.nodes[p.0].needs_grad {
                    continue;
                }
                debug_assert_eq!(
                    c.shape(),
                    self.nodes[p.0].value.shape(),
                    "gradient shape mismatch at node {}",
                    p.0
                );
                match &mut grads[p.0] {
                    Some(acc) => *acc += &c,
                    slot @ None => *slot = Some(c),
                }
            }
            if !node.parents.is_empty() {
                grads[i] = None;
            }
        }
        Gradients { grads }
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, IxDyn};

    #[test]
    fn backward_accumulates_over_reuse() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.param(arr1(&[2.0, 3.0]).into_dyn());
        let y = g.mul(x, x); // x^2
        let z = g.add(y, x); // x^2 + x
        let s = g.sum_all(z);
        let grads = g.backward(s);
        let gx = grads.get(x).unwrap();
        // d/dx (x^2 + x) = 2x + 1
        assert_eq!(gx[[0]], 5.0);
        assert_eq!(gx[[1]], 7.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.param(arr1(&[1.0]).into_dyn());
        let c = g.constant(arr1(&[4.0]).into_dyn());
        let y = g.mul(x, c);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap()[[0]], 4.0);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.param(arr1(&[3.0]).into_dyn());
        let d = g.detach(x);
        let y = g.mul(x, d); // value 9, grad should be d = 3 (not 2x)
        let s = g.sum_all(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap()[[0]], 3.0);
    }

    #[test]
    fn scalar_leaf_shape() {
        let mut g: Graph<f32> = Graph::new();
        let s = g.scalar(2.5);
        assert_eq!(g.shape(s), &[1]);
        assert_eq!(g.value(s)[IxDyn(&[0])], 2.5);
    }
}
