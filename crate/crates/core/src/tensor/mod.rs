//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Every operation that has at least one gradient-tracking input records a
//! backward node holding its inputs and whatever it saved during the forward
//! pass. [`Tensor::backward`] walks that graph in reverse topological order
//! and accumulates gradients into the leaves that require them.

mod conv;
pub mod grad_check;
mod loss;
mod nn;
mod ops;
mod sample;
mod scalar;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

pub use conv::{conv2d, conv_output_size, conv_transpose2d, conv_transpose_output_size};
pub use loss::{
    bce_with_logits, l1_loss, l1_per_sample, mse_loss, weighted_cross_entropy, LabelWeights,
};
pub use nn::{batch_norm, linear, BatchNorm, NormMode};
pub use ops::{
    add, broadcast_to, concat, div, exp, index_select, leaky_relu, mean, mul, reshape, scale,
    softmax_weights, sub, sum, tanh,
};
pub use sample::grid_sample;
pub use scalar::Scalar;

use crate::error::{Error, Result};

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` without recording any backward graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            NO_GRAD.with(|c| c.set(self.0));
        }
    }
    let _restore = Restore(NO_GRAD.with(|c| c.replace(true)));
    f()
}

fn grad_enabled() -> bool {
    !NO_GRAD.with(|c| c.get())
}

/// Backward rule of a recorded operation.
pub(crate) trait Backward<T: Scalar> {
    fn parents(&self) -> Vec<&Tensor<T>>;

    /// Gradients for each parent, in `parents()` order. `None` where the
    /// parent does not require a gradient.
    fn backward(&self, output: &[T], grad_output: &[T]) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    op: Option<Box<dyn Backward<T>>>,
}

/// N-dimensional array handle. Cloning is cheap and shares storage.
pub struct Tensor<T: Scalar = f32> {
    node: Rc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.node.data.borrow();
        let preview: Vec<_> = data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                "*",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// A leaf that accumulates gradients.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        Ok(Self::leaf(t.to_vec(), shape.to_vec(), true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::leaf(vec![value; n], shape.to_vec(), false)
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![value], Vec::new(), false)
    }

    fn leaf(data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor {
            node: Rc::new(Node {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                op: None,
            }),
        }
    }

    /// Builds an operation output, recording `op` only when some parent
    /// tracks gradients and recording is enabled.
    pub(crate) fn from_op(data: Vec<T>, shape: Vec<usize>, op: impl Backward<T> + 'static) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let track = grad_enabled() && op.parents().iter().any(|p| p.requires_grad());
        Tensor {
            node: Rc::new(Node {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: track,
                op: if track { Some(Box::new(op)) } else { None },
            }),
        }
    }

    /// Same as [`from_op`](Self::from_op) for outputs of untracked inputs.
    pub(crate) fn constant(data: Vec<T>, shape: Vec<usize>) -> Self {
        Self::leaf(data, shape, false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.op.is_none()
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.node.data.borrow()
    }

    /// Mutable access for optimizers and checkpoint loading. Only valid on leaves.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        assert!(self.is_leaf(), "in-place update of a non-leaf tensor");
        self.node.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        let d = self.node.data.borrow();
        assert_eq!(
            d.len(),
            1,
            "item() on tensor of shape {:?}",
            self.node.shape
        );
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<T>>> {
        self.node.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Copy of the values cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.to_vec(), self.node.shape.clone(), false)
    }

    /// Converts element type, dropping the graph.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data().iter().map(|v| U::of(v.as_f64())).collect();
        Tensor::leaf(
            data,
            self.node.shape.clone(),
            self.requires_grad() && self.is_leaf(),
        )
    }

    fn id(&self) -> *const Node<T> {
        Rc::as_ptr(&self.node)
    }

    /// Reverse-mode differentiation of a scalar.
    ///
    /// Gradients are added to the `grad` of every gradient-tracking leaf;
    /// calling twice without zeroing accumulates.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let index: HashMap<*const Node<T>, usize> =
            order.iter().enumerate().map(|(i, t)| (t.id(), i)).collect();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; order.len()];
        grads[order.len() - 1] = Some(vec![T::one()]);

        for i in (0..order.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let t = &order[i];
            match &t.node.op {
                None => {
                    let mut slot = t.node.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        None => *slot = Some(g),
                    }
                }
                Some(op) => {
                    let parent_grads = {
                        let out = t.node.data.borrow();
                        op.backward(&out, &g)
                    };
                    for (p, pg) in op.parents().into_iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel());
                        let j = index[&p.id()];
                        match grads[j].as_mut() {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                            None => grads[j] = Some(pg),
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradient-tracking nodes reachable from `self`, parents first.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.node.op {
                for p in op.parents() {
                    if p.requires_grad() && !seen.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

pub(crate) fn check_same_shape<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<()> {
    if a.shape() != b.shape() {
        let axis = if a.rank() != b.rank() {
            "rank".to_string()
        } else {
            a.shape()
                .iter()
                .zip(b.shape())
                .position(|(x, y)| x != y)
                .map(|i| i.to_string())
                .unwrap_or_default()
        };
        return Err(Error::dim(
            op,
            axis,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![1.0; 5], &[2, 3]).is_err());
        let t = Tensor::<f32>::new(vec![1.0; 6], &[2, 3]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let w = Tensor::<f64>::param(vec![0.5, -1.0, 2.0], &[3]).unwrap();
        sum(&w).backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let w = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let sq = mul(&w, &w).unwrap();
        sum(&sq).backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let w = Tensor::<f64>::param(vec![3.0], &[1]).unwrap();
        let loss = sum(&scale(&w, 2.0));
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![4.0]);
        w.zero_grad();
        assert!(w.grad().is_none());
    }

    #[test]
    fn reused_tensor_collects_every_path() {
        // f = x*y + x  =>  df/dx = y + 1, df/dy = x
        let x = Tensor::<f64>::param(vec![3.0], &[1]).unwrap();
        let y = Tensor::<f64>::param(vec![5.0], &[1]).unwrap();
        let f = add(&mul(&x, &y).unwrap(), &x).unwrap();
        sum(&f).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
        assert_eq!(y.grad().unwrap(), vec![3.0]);
    }

    #[test]
    fn constants_never_get_grads() {
        let c = Tensor::<f64>::new(vec![1.0, 2.0], &[2]).unwrap();
        let w = Tensor::<f64>::param(vec![1.0, 1.0], &[2]).unwrap();
        sum(&mul(&c, &w).unwrap()).backward().unwrap();
        assert!(c.grad().is_none());
        assert_eq!(w.grad().unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let w = Tensor::<f64>::param(vec![1.0, 1.0], &[2]).unwrap();
        assert!(matches!(scale(&w, 1.0).backward(), Err(Error::Argument(_))));
    }

    #[test]
    fn no_grad_records_nothing() {
        let w = Tensor::<f64>::param(vec![1.0], &[1]).unwrap();
        let y = no_grad(|| scale(&w, 3.0));
        assert!(!y.requires_grad());
        assert!(scale(&w, 3.0).requires_grad());
    }
}
