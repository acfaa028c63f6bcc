//! Dense f64 tensors with tape-style reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable node in a computation graph. Operations
//! record their parents and a closure mapping the output gradient to the
//! parent gradients; [`Tensor::backward`] walks the graph in reverse
//! topological order. The graph is rebuilt for every forward pass.

mod gradcheck;
mod ops;
mod rng;

pub use gradcheck::{compare_with_finite_differences, finite_diff_check, GradReport};
pub use ops::cross_entropy_soft;
pub use rng::{derive_seed, Rng, Stream};

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub(crate) type GradFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    grad_fn: Option<GradFn>,
    requires_grad: bool,
    backward_done: Cell<bool>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("values", &self.0.values)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn check_len(values: &[f64], shape: &[usize]) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != values.len() {
        return Err(Error::Dimension(format!(
            "shape {:?} holds {} values, got {}",
            shape,
            n,
            values.len()
        )));
    }
    Ok(())
}

impl Tensor {
    fn build(
        values: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        grad_fn: Option<GradFn>,
        requires_grad: bool,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor(Rc::new(Node {
            shape,
            values,
            grad: RefCell::new(None),
            parents,
            grad_fn,
            requires_grad,
            backward_done: Cell::new(false),
        }))
    }

    /// A constant: never receives a gradient.
    pub fn new(values: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        check_len(&values, &shape)?;
        Ok(Tensor::build(values, shape, Vec::new(), None, false))
    }

    /// A graph input (parameter or differentiable input) that receives a gradient.
    pub fn leaf(values: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        check_len(&values, &shape)?;
        Ok(Tensor::build(values, shape, Vec::new(), None, true))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::build(vec![v], Vec::new(), Vec::new(), None, false)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::build(vec![0.0; n], shape, Vec::new(), None, false)
    }

    /// Result of an operation. Parents that do not require gradients are dropped.
    pub(crate) fn from_op(
        values: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        grad_fn: GradFn,
    ) -> Tensor {
        if parents.iter().any(|p| p.requires_grad()) {
            Tensor::build(values, shape, parents, Some(grad_fn), true)
        } else {
            Tensor::build(values, shape, Vec::new(), None, false)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.0.values
    }

    pub fn numel(&self) -> usize {
        self.0.values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.0.values[0])
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn same_node(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }

    /// Nodes reachable from `self` that require gradients, parents before children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node> = HashSet::new();
        // (node, children already pushed)
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !t.requires_grad() || !seen.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in t.0.parents.iter().rev() {
                if p.requires_grad() && !seen.contains(&p.key()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    /// Back-propagates from a scalar loss, populating `grad` on every node
    /// in the graph that requires one.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if self.0.backward_done.get() {
            return Err(Error::State(
                "backward() already ran on this graph; call reset_grads() first".into(),
            ));
        }
        if !self.requires_grad() {
            *self.0.grad.borrow_mut() = Some(vec![1.0]);
            self.0.backward_done.set(true);
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<*const Node, Vec<f64>> = HashMap::new();
        pending.insert(self.key(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.key()) else {
                continue;
            };
            if let Some(f) = &t.0.grad_fn {
                let parent_grads = f(&g);
                for (p, pg) in t.0.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !p.requires_grad() {
                        continue;
                    }
                    match pending.get_mut(&p.key()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        None => {
                            pending.insert(p.key(), pg);
                        }
                    }
                }
            }
            *t.0.grad.borrow_mut() = Some(g);
        }
        self.0.backward_done.set(true);
        Ok(())
    }

    /// Clears every gradient in the graph and re-arms `backward()`.
    pub fn reset_grads(&self) {
        for t in self.topo_order() {
            *t.0.grad.borrow_mut() = None;
        }
        *self.0.grad.borrow_mut() = None;
        self.0.backward_done.set(false);
    }
}
