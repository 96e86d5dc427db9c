//! Reverse-mode autodiff over a dynamically recorded tape.
//!
//! A [`Tape`] records one forward computation as a sequence of nodes; each
//! node owns its value and an optional backward closure that scatters the
//! node's output gradient into its parents. Node ids are strictly increasing,
//! so a single reverse sweep over the node list is a valid reverse topological
//! order. Values are immutable after the forward pass; gradient buffers are
//! the only mutation and live outside the nodes.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Backward closure: receives the output gradient and a sink for parent
/// gradient accumulation.
pub type BackwardFn = Box<dyn Fn(&[f64], &mut GradSink)>;

struct Node {
    shape: Rc<Vec<usize>>,
    value: Rc<Vec<f64>>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Recording tape; cheap to clone (shared handle).
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Accumulation target handed to backward closures.
pub struct GradSink<'a> {
    bufs: &'a mut [Option<Vec<f64>>],
    sizes: &'a [usize],
}

impl<'a> GradSink<'a> {
    /// Run `f` over the (lazily allocated) gradient buffer of node `id`.
    pub fn with(&mut self, id: usize, f: impl FnOnce(&mut [f64])) {
        let buf = self.bufs[id].get_or_insert_with(|| vec![0.0; self.sizes[id]]);
        f(buf);
    }

    /// Add `contrib` elementwise into the gradient of node `id`.
    pub fn accumulate(&mut self, id: usize, contrib: &[f64]) {
        self.with(id, |buf| {
            debug_assert_eq!(buf.len(), contrib.len());
            for (b, c) in buf.iter_mut().zip(contrib) {
                *b += c;
            }
        });
    }
}

/// Handle to a tensor recorded on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
    shape: Rc<Vec<usize>>,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape)
            .finish()
    }
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn shape(&self) -> Rc<Vec<usize>> {
        Rc::clone(&self.shape)
    }

    pub fn dims(&self) -> Vec<usize> {
        self.shape.as_ref().clone()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self) -> Rc<Vec<f64>> {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].needs_grad
    }

    /// Copy out as a host tensor.
    pub fn tensor(&self) -> Tensor {
        Tensor::from_vec(&self.shape, self.value().to_vec()).expect("node shape consistent")
    }

    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "scalar() on non-scalar var");
        self.value()[0]
    }

    pub fn same_tape(&self, other: &Var) -> bool {
        Rc::ptr_eq(&self.tape.inner, &other.tape.inner)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Tracked leaf: gradients will be available after backward.
    pub fn var(&self, t: Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data_rc(), None, true)
    }

    /// Untracked constant: no gradient flows into it.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data_rc(), None, false)
    }

    pub fn scalar_const(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Record a node. `needs_grad` is forced false when no backward fn is
    /// given and the node is not a leaf.
    pub(crate) fn push(
        &self,
        shape: Vec<usize>,
        value: Rc<Vec<f64>>,
        backward: Option<BackwardFn>,
        needs_grad: bool,
    ) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        let shape = Rc::new(shape);
        inner.nodes.push(Node {
            shape: Rc::clone(&shape),
            value,
            backward,
            needs_grad,
        });
        Var {
            tape: self.clone(),
            id,
            shape,
        }
    }

    /// Record an op node whose parents are `parents`; the backward closure is
    /// dropped when no parent tracks gradients.
    pub fn op(
        &self,
        parents: &[&Var],
        shape: Vec<usize>,
        value: Vec<f64>,
        backward: BackwardFn,
    ) -> Var {
        let needs = parents.iter().any(|p| p.needs_grad());
        debug_assert!(parents.iter().all(|p| Rc::ptr_eq(&p.tape.inner, &self.inner)),
            "op parents must live on the same tape");
        self.push(
            shape,
            Rc::new(value),
            if needs { Some(backward) } else { None },
            needs,
        )
    }

    /// Reverse sweep from a scalar output. Returns the gradient set.
    pub fn backward(&self, output: &Var) -> Result<Grads> {
        if output.len() != 1 {
            return Err(Error::shape(
                "backward",
                "scalar output",
                format!("{:?}", output.shape()),
            ));
        }
        let inner = self.inner.borrow();
        let n = inner.nodes.len();
        let sizes: Vec<usize> = inner
            .nodes
            .iter()
            .map(|node| node.shape.iter().product())
            .collect();
        let mut bufs: Vec<Option<Vec<f64>>> = vec![None; n];
        bufs[output.id] = Some(vec![1.0]);

        for id in (0..=output.id).rev() {
            let Some(grad) = bufs[id].take() else {
                continue;
            };
            let node = &inner.nodes[id];
            if let Some(back) = &node.backward {
                let mut sink = GradSink {
                    bufs: &mut bufs,
                    sizes: &sizes,
                };
                back(&grad, &mut sink);
            } else if node.needs_grad {
                // Leaf: keep its gradient.
                bufs[id] = Some(grad);
            }
        }
        Ok(Grads { bufs, sizes })
    }
}

/// Gradients produced by one backward sweep.
pub struct Grads {
    bufs: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
}

impl Grads {
    /// Gradient of the swept output w.r.t. `var` (zeros if it never received
    /// any flow).
    pub fn get(&self, var: &Var) -> Tensor {
        match &self.bufs[var.id] {
            Some(buf) => Tensor::from_vec(&var.shape, buf.clone()).expect("grad shape"),
            None => Tensor::zeros(&var.shape),
        }
    }

    /// Take the raw gradient buffer for `var`, if any flow reached it.
    pub fn take(&mut self, var: &Var) -> Option<Vec<f64>> {
        debug_assert_eq!(self.sizes[var.id], var.len());
        self.bufs[var.id].take()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops;

    #[test]
    fn leaf_gradient_of_product() {
        let tape = Tape::new();
        let a = tape.var(Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        let b = tape.var(Tensor::from_vec(&[2], vec![5.0, 6.0]).unwrap());
        let prod = ops::mul(&a, &b).unwrap();
        let loss = ops::sum(&prod).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&a).data(), &[5.0, 6.0]);
        assert_eq!(grads.get(&b).data(), &[3.0, 4.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let a = tape.var(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let c = tape.constant(Tensor::from_vec(&[2], vec![10.0, 20.0]).unwrap());
        let loss = ops::sum(&ops::mul(&a, &c).unwrap()).unwrap();
        let mut grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&a).data(), &[10.0, 20.0]);
        assert!(grads.take(&c).is_none());
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(3.0));
        // f = x*x + x  =>  f' = 2x + 1 = 7
        let f = ops::add(&ops::mul(&x, &x).unwrap(), &x).unwrap();
        let grads = tape.backward(&f).unwrap();
        assert_eq!(grads.get(&x).item(), 7.0);
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let x = tape.var(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        assert!(tape.backward(&x).is_err());
    }
}
