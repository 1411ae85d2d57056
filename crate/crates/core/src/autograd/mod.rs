//! A small reverse-mode automatic differentiation engine over dense `f64`
//! tensors.
//!
//! Every operation on a [`Var`] eagerly computes its value and, when any
//! input requires a gradient, records a closure that maps the output
//! gradient to input gradients. [`Var::backward`] walks the recorded graph
//! in reverse topological order. Leaves keep their accumulated gradient;
//! intermediate gradients are released as soon as they have been consumed.

pub mod gradcheck;
mod nn_ops;
mod ops;
mod params;

pub use nn_ops::ConvGeometry;
pub use ops::{gelu, permute_index, sigmoid, ZERO_INDEX};
pub use params::{AdamW, AdamWConfig, Graph, Init, ParamId, ParamStore};

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

type BackwardFn = Box<dyn Fn(&[f64], &[Var], &Tensor) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
}

/// A node in the computation graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({:?}, grad={})", self.0.value, self.0.requires_grad)
    }
}

impl Var {
    /// A leaf that never receives gradients.
    pub fn constant(value: Tensor) -> Var {
        Var(Rc::new(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
            grad: RefCell::new(None),
        }))
    }

    /// A leaf whose gradient is accumulated by [`Var::backward`].
    pub fn leaf(value: Tensor) -> Var {
        Var(Rc::new(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
            grad: RefCell::new(None),
        }))
    }

    pub(crate) fn from_op(
        value: Tensor,
        parents: Vec<Var>,
        backward: impl Fn(&[f64], &[Var], &Tensor) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Var {
        if parents.iter().any(Var::requires_grad) {
            Var(Rc::new(Node {
                value,
                parents,
                backward: Some(Box::new(backward)),
                requires_grad: true,
                grad: RefCell::new(None),
            }))
        } else {
            Var::constant(value)
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.value.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.value.data
    }

    pub fn numel(&self) -> usize {
        self.0.value.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Accumulated gradient of a leaf after [`Var::backward`].
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    /// Back-propagates from a scalar output.
    pub fn backward(&self) {
        assert_eq!(self.numel(), 1, "backward() needs a scalar output");
        self.backward_with(vec![1.0]);
    }

    /// Back-propagates an explicit output gradient.
    pub fn backward_with(&self, seed: Vec<f64>) {
        assert_eq!(seed.len(), self.numel());
        if !self.requires_grad() {
            return;
        }
        let order = self.topo_order();
        accumulate(&self.0.grad, seed);
        for var in order.iter().rev() {
            let node = &var.0;
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = node.grad.borrow_mut().take() else {
                continue;
            };
            let parent_grads = backward(&grad, &node.parents, &node.value);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    if parent.requires_grad() {
                        debug_assert_eq!(pg.len(), parent.numel());
                        accumulate(&parent.0.grad, pg);
                    }
                }
            }
        }
    }

    fn topo_order(&self) -> Vec<Var> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Var, bool)> = vec![(self.clone(), false)];
        while let Some((var, expanded)) = stack.pop() {
            if expanded {
                order.push(var);
                continue;
            }
            let ptr = Rc::as_ptr(&var.0);
            if !visited.insert(ptr) {
                continue;
            }
            stack.push((var.clone(), true));
            for p in &var.0.parents {
                if p.requires_grad() && !visited.contains(&Rc::as_ptr(&p.0)) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

fn accumulate(slot: &RefCell<Option<Vec<f64>>>, g: Vec<f64>) {
    let mut slot = slot.borrow_mut();
    match slot.as_mut() {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Rounds a value to the nearest `f32` and widens it back.
#[inline]
pub fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

#[cfg(test)]
mod tests;
