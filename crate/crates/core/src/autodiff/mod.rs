//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records operations as they execute; [`Var`] is a handle to a
//! node on the tape. The tape is rebuilt on every forward pass and replayed
//! in reverse id order, which is already a topological order because nodes
//! are append-only. Replay is deterministic: identical inputs produce
//! bit-identical gradients at fixed precision.
//!
//! A tape is single-owner: one forward/backward pass per tape, no sharing
//! across threads. Ops whose inputs all have `requires_grad == false` record
//! no backward closure, so the same code path doubles as a no-grad
//! inference path.

mod conv;
mod gradcheck;
mod linalg;
mod ops;

pub use gradcheck::{gradcheck, gradcheck_subset, GradcheckReport};
pub use ops::concat;

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{Result, Scalar, Tensor, TensorError};

type BackFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Tensor<T>>>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackFn<T>>,
    requires_grad: bool,
}

struct TapeInner<T: Scalar> {
    nodes: Vec<Node<T>>,
}

pub struct Tape<T: Scalar> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Scalar> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Self {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone)]
pub struct Var<T: Scalar> {
    tape: Tape<T>,
    id: usize,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new() })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input node.
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        self.push_node(value, vec![], None, true)
    }

    /// A node that never receives gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        self.push_node(value, vec![], None, false)
    }

    fn push_node(
        &self,
        value: Tensor<T>,
        parents: Vec<usize>,
        backward: Option<BackFn<T>>,
        requires_grad: bool,
    ) -> Var<T> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var {
            tape: self.clone(),
            id,
        }
    }

    /// Records an op result. The value is checked for finiteness; the
    /// backward closure is dropped when no parent needs gradients.
    pub(crate) fn push_op(
        &self,
        ctx: &'static str,
        value: Tensor<T>,
        parents: &[&Var<T>],
        backward: impl FnOnce() -> BackFn<T>,
    ) -> Result<Var<T>> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { ctx });
        }
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let parent_ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let back = if requires_grad {
            Some(backward())
        } else {
            None
        };
        Ok(self.push_node(value, parent_ids, back, requires_grad))
    }
}

/// Gradients produced by [`Var::backward`], keyed by node id.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `var`. Nodes the loss does not
    /// reach get a zero gradient of the right shape.
    pub fn wrt(&self, var: &Var<T>) -> Tensor<T> {
        match self.grads.get(var.id).and_then(|g| g.clone()) {
            Some(g) => g,
            None => Tensor::zeros(var.value().shape().to_vec()),
        }
    }
}

impl<T: Scalar> Var<T> {
    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    pub(crate) fn same_tape(&self, other: &Var<T>) -> Result<()> {
        if !Rc::ptr_eq(&self.tape.inner, &other.tape.inner) {
            return Err(TensorError::Invalid {
                ctx: "Var",
                msg: "operands live on different tapes".into(),
            });
        }
        Ok(())
    }

    /// Reverse-mode sweep from a scalar loss. Every `requires_grad` node
    /// reachable from the loss receives d(loss)/d(node).
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.numel() != 1 {
            return Err(TensorError::Invalid {
                ctx: "backward",
                msg: format!("loss must be scalar, shape is {:?}", self.shape()),
            });
        }
        let inner = self.tape.inner.borrow();
        let n = inner.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        grads[self.id] = Some(Tensor::scalar(T::ONE));
        for id in (0..=self.id).rev() {
            let node = &inner.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[id].clone() else {
                continue;
            };
            let Some(back) = node.backward.as_ref() else {
                continue;
            };
            let parent_grads = back(&gout);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (pid, pg) in node.parents.iter().zip(parent_grads) {
                if !inner.nodes[*pid].requires_grad {
                    continue;
                }
                grads[*pid] = Some(match grads[*pid].take() {
                    None => pg,
                    Some(acc) => accumulate(&acc, &pg),
                });
            }
        }
        drop(inner);
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::new_unchecked(a.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_sum_gives_ones() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let loss = a.sum_all().unwrap();
        let g = loss.backward().unwrap();
        assert_eq!(g.wrt(&a).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square() {
        // loss = sum(a*a) at a=[3] -> grad 2a = [6]
        let tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::new(vec![1], vec![3.0]).unwrap());
        let loss = a.mul(&a).unwrap().sum_all().unwrap();
        let g = loss.backward().unwrap();
        assert_eq!(g.wrt(&a).data(), &[6.0]);
    }

    #[test]
    fn product_rule() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::new(vec![1], vec![2.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![1], vec![5.0]).unwrap());
        let loss = a.mul(&b).unwrap().sum_all().unwrap();
        let g = loss.backward().unwrap();
        assert_eq!(g.wrt(&a).data(), &[5.0]);
        assert_eq!(g.wrt(&b).data(), &[2.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let loss = a.sum_all().unwrap();
        let g = loss.backward().unwrap();
        assert_eq!(g.wrt(&b).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(a.backward().is_err());
    }

    #[test]
    fn constant_inputs_record_no_closure() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let s = a.exp().unwrap();
        assert!(!s.requires_grad());
    }
}
