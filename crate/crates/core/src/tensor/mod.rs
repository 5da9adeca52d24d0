//! Dense tensors with define-by-run reverse-mode differentiation.
//!
//! A [`Tensor`] is a cheap handle (`Rc`) onto a buffer plus an optional record
//! of the operation that produced it. Every differentiable op in this module
//! builds its output with [`Tensor::from_op`], capturing whatever it needs for
//! the backward pass in a closure. Graphs are rebuilt on every forward pass and
//! never shared across threads.

mod conv;
mod gradcheck;
mod ops;
mod scalar;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

pub use conv::{conv2d, conv3d, conv_transpose3d};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use ops::{
    add, add_scalar, concat_channels, expand_repeat, instance_norm, leaky_relu, mean_all, mul, permute_axes,
    pointwise, reduce_mean, relu, scale, sigmoid, slice_channels, softmax_channel, square, sub, Pointwise, INSTANCE_NORM_EPS,
};
pub use scalar::Scalar;
pub(crate) use scalar::{gemm, MatView};

use crate::error::{Error, Result};

/// Backward rule of an op: maps the upstream gradient (same shape as the
/// output) to one optional gradient per input. `needs[i]` tells the rule
/// whether input `i` participates in differentiation; rules may return `None`
/// for inputs that do not.
pub type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>>>;

struct Node<T: Scalar> {
    op: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<T>>>,
    node: Option<Node<T>>,
}

pub struct Tensor<T: Scalar = f32>(Rc<Inner<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.0.node.as_ref().map(|n| n.op))
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Inner {
            shape,
            data: RefCell::new(data),
            requires_grad: Cell::new(requires_grad),
            grad: RefCell::new(None),
            node: None,
        }))
    }

    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::leaf(shape.to_vec(), vec![value; numel(shape)], false)
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(Vec::new(), vec![value], false)
    }

    /// Marks a leaf as a differentiation target.
    pub fn requires_grad_(self, flag: bool) -> Self {
        assert!(self.is_leaf(), "requires_grad_ only applies to leaf tensors");
        self.0.requires_grad.set(flag);
        self
    }

    /// Output of a differentiable op. When no input requires a gradient the
    /// result is a plain leaf and `backward` is dropped.
    pub fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len(), "{op}");
        if !inputs.iter().any(Tensor::requires_grad) {
            return Self::leaf(shape, data, false);
        }
        Tensor(Rc::new(Inner {
            shape,
            data: RefCell::new(data),
            requires_grad: Cell::new(true),
            grad: RefCell::new(None),
            node: Some(Node { op, inputs, backward }),
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// Name of the producing op, `None` for leaves.
    pub fn op(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op)
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    /// Mutable access to the buffer. Used by optimizers and finite
    /// differences; mutating a tensor that an existing graph captured
    /// invalidates that graph's backward pass.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    pub fn set_data(&self, data: Vec<T>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::shape(
                "set_data",
                format!("expected {} values, got {}", self.numel(), data.len()),
            ));
        }
        *self.0.data.borrow_mut() = data;
        Ok(())
    }

    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<T>>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Copy of the data detached from any graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.0.shape.clone(), self.to_vec(), false)
    }

    /// Leaf copy in another precision, keeping the `requires_grad` flag.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data().iter().map(|v| U::of(v.as_f64())).collect();
        Tensor::leaf(self.0.shape.clone(), data, self.requires_grad())
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?} changes element count", self.shape()),
            ));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    fn key(&self) -> *const Inner<T> {
        Rc::as_ptr(&self.0)
    }

    /// Reverse-mode accumulation from a scalar loss.
    ///
    /// Gradients are added to any gradient already stored on a tensor, so two
    /// calls without [`Tensor::zero_grad`] in between accumulate. Every tensor
    /// reachable through `requires_grad` edges ends up with a populated grad.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<*const Inner<T>, Vec<T>> = HashMap::new();
        pending.insert(self.key(), vec![T::one()]);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.key()) else {
                continue;
            };
            if let Some(node) = &t.0.node {
                let needs: Vec<bool> = node.inputs.iter().map(Tensor::requires_grad).collect();
                let grads = (node.backward)(&g, &needs);
                debug_assert_eq!(grads.len(), node.inputs.len(), "{}", node.op);
                for ((input, gi), need) in node.inputs.iter().zip(grads).zip(needs) {
                    let Some(gi) = gi else { continue };
                    if !need {
                        continue;
                    }
                    debug_assert_eq!(gi.len(), input.numel(), "{} grad length", node.op);
                    match pending.get_mut(&input.key()) {
                        Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a = *a + *b),
                        None => {
                            pending.insert(input.key(), gi);
                        }
                    }
                }
            }
            let mut slot = t.0.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Post-order over tensors that require grad (inputs before outputs).
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Inner<T>> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.key());
        while let Some((t, next)) = stack.pop() {
            let inputs = t.0.node.as_ref().map(|n| n.inputs.as_slice()).unwrap_or(&[]);
            if let Some(child) = inputs[next.min(inputs.len())..].iter().position(|c| {
                c.requires_grad() && !seen.contains(&c.key())
            }) {
                let idx = next + child;
                let c = inputs[idx].clone();
                stack.push((t, idx + 1));
                seen.insert(c.key());
                stack.push((c, 0));
            } else {
                order.push(t);
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_data_length_must_agree() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn sum_loss_gives_ones() {
        let x = Tensor::<f64>::new(&[3], vec![1.0, -2.0, 5.0]).unwrap().requires_grad_(true);
        let loss = scale(&mean_all(&x), 3.0);
        loss.backward().unwrap();
        for g in x.grad().unwrap() {
            assert!((g - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mse_gradient_matches_closed_form() {
        let xv = vec![0.3, -1.2, 2.0, 0.5];
        let yv = vec![0.1, 0.4, -0.3, 0.5];
        let x = Tensor::<f64>::new(&[4], xv.clone()).unwrap().requires_grad_(true);
        let y = Tensor::<f64>::new(&[4], yv.clone()).unwrap();
        let loss = mean_all(&square(&sub(&x, &y).unwrap()));
        loss.backward().unwrap();
        let g = x.grad().unwrap();
        for i in 0..4 {
            assert!((g[i] - 2.0 * (xv[i] - yv[i]) / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn disconnected_tensor_keeps_no_grad() {
        let x = Tensor::<f32>::ones(&[2]).requires_grad_(true);
        let other = Tensor::<f32>::ones(&[2]).requires_grad_(true);
        mean_all(&x).backward().unwrap();
        assert!(x.grad().is_some());
        assert!(other.grad().is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::<f32>::ones(&[2]).requires_grad_(true);
        assert!(matches!(relu(&x).backward(), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::<f64>::ones(&[2]).requires_grad_(true);
        let loss = mean_all(&x);
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn intermediates_receive_grads_and_shared_inputs_sum() {
        let x = Tensor::<f64>::new(&[2], vec![1.0, 2.0]).unwrap().requires_grad_(true);
        let h = relu(&x);
        let loss = mean_all(&add(&h, &h).unwrap());
        loss.backward().unwrap();
        assert_eq!(h.grad().unwrap(), vec![1.0, 1.0]);
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn detach_cuts_the_graph() {
        let x = Tensor::<f32>::ones(&[2]).requires_grad_(true);
        let d = relu(&x).detach();
        assert!(!d.requires_grad());
        assert!(d.is_leaf());
    }
}
