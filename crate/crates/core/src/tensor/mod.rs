//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable value plus an optional record of the
//! operation that produced it. Calling [`backward`] on a scalar walks that
//! record and accumulates gradients into every reachable variable leaf.
//! Variables (created with [`Tensor::var`]) are the only tensors that hold
//! gradient buffers; their data can be rewritten in place by optimizers and
//! checkpoint loading.

mod autograd;
mod conv;
mod element;
mod ops;
mod shape;

pub mod gradcheck;

#[cfg(test)]
mod op_tests;

pub use autograd::{backward, backward_profiled, grad_enabled, no_grad};
pub use conv::conv_out_extent;
pub use element::{gemm_slices, Dtype, Element};
pub use shape::Shape;

pub(crate) use autograd::Op;

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

struct Inner<E: Element> {
    id: u64,
    shape: Shape,
    data: RwLock<Vec<E>>,
    op: Op<E>,
    requires_grad: bool,
    is_var: bool,
    grad: Mutex<Option<Vec<E>>>,
}

/// Cheaply clonable handle to a tensor value and its autodiff record.
pub struct Tensor<E: Element> {
    inner: Arc<Inner<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<E: Element> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor<{:?}>[{}]{}",
            E::DTYPE,
            self.shape(),
            if self.is_var() { " var" } else { "" }
        )
    }
}

/// Read guard over a tensor's elements.
pub struct DataRef<'a, E: Element>(RwLockReadGuard<'a, Vec<E>>);

impl<E: Element> std::ops::Deref for DataRef<'_, E> {
    type Target = [E];
    fn deref(&self) -> &[E] {
        &self.0
    }
}

impl<E: Element> Tensor<E> {
    fn build(data: Vec<E>, shape: Shape, op: Op<E>, requires_grad: bool, is_var: bool) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape,
                data: RwLock::new(data),
                op,
                requires_grad,
                is_var,
                grad: Mutex::new(None),
            }),
        }
    }

    /// Leaf tensor that never accumulates gradient.
    pub fn from_vec(data: Vec<E>, dims: impl Into<Shape>) -> Result<Self> {
        let shape = dims.into();
        if data.len() != shape.numel() {
            return Err(Error::Invalid {
                op: "from_vec",
                msg: format!("{} elements for shape {}", data.len(), shape),
            });
        }
        Ok(Self::build(data, shape, Op::Leaf, false, false))
    }

    /// Variable leaf: participates in backward and holds a gradient buffer.
    pub fn var(data: Vec<E>, dims: impl Into<Shape>) -> Result<Self> {
        let shape = dims.into();
        if data.len() != shape.numel() {
            return Err(Error::Invalid {
                op: "var",
                msg: format!("{} elements for shape {}", data.len(), shape),
            });
        }
        Ok(Self::build(data, shape, Op::Leaf, true, true))
    }

    pub fn scalar(v: E) -> Self {
        Self::build(vec![v], Shape::scalar(), Op::Leaf, false, false)
    }

    pub fn zeros(dims: impl Into<Shape>) -> Self {
        let shape = dims.into();
        let n = shape.numel();
        Self::build(vec![E::zero(); n], shape, Op::Leaf, false, false)
    }

    pub fn ones(dims: impl Into<Shape>) -> Self {
        let shape = dims.into();
        let n = shape.numel();
        Self::build(vec![E::one(); n], shape, Op::Leaf, false, false)
    }

    pub fn full(dims: impl Into<Shape>, v: E) -> Self {
        let shape = dims.into();
        let n = shape.numel();
        Self::build(vec![v; n], shape, Op::Leaf, false, false)
    }

    /// Standard-normal samples (drawn in f64, then converted).
    pub fn randn(dims: impl Into<Shape>, rng: &mut impl Rng) -> Self {
        let shape = dims.into();
        let n = shape.numel();
        let data: Vec<E> = (0..n)
            .map(|_| E::from_f64(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self::build(data, shape, Op::Leaf, false, false)
    }

    pub fn rand_uniform(dims: impl Into<Shape>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let shape = dims.into();
        let n = shape.numel();
        let data: Vec<E> = (0..n)
            .map(|_| E::from_f64(rng.gen_range(lo..hi)))
            .collect();
        Self::build(data, shape, Op::Leaf, false, false)
    }

    pub(crate) fn from_op(data: Vec<E>, shape: Shape, op: Op<E>) -> Self {
        if autograd::grad_enabled() && op.any_parent_requires_grad() {
            Self::build(data, shape, op, true, false)
        } else {
            Self::build(data, shape, Op::Leaf, false, false)
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &Shape {
        &self.inner.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.inner.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.rank()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_var(&self) -> bool {
        self.inner.is_var
    }

    pub(crate) fn op(&self) -> &Op<E> {
        &self.inner.op
    }

    pub fn data(&self) -> DataRef<'_, E> {
        DataRef(self.inner.data.read().unwrap())
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.inner.data.read().unwrap().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> E {
        let d = self.inner.data.read().unwrap();
        assert_eq!(d.len(), 1, "item() on tensor of {} elements", d.len());
        d[0]
    }

    pub fn is_finite(&self) -> bool {
        self.inner.data.read().unwrap().iter().all(|v| v.is_finite())
    }

    /// Overwrites the value in place. Only meaningful for leaves (optimizer
    /// updates, checkpoint loading); existing graph records keep their ids.
    pub fn set_data(&self, new: &[E]) -> Result<()> {
        if new.len() != self.numel() {
            return Err(Error::Invalid {
                op: "set_data",
                msg: format!("{} elements for shape {}", new.len(), self.shape()),
            });
        }
        self.inner.data.write().unwrap().copy_from_slice(new);
        Ok(())
    }

    /// Accumulated gradient, if any backward pass has reached this variable.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.lock().unwrap().clone()
    }

    /// Gradient with unreached-leaf semantics: zeros when absent.
    pub fn grad_or_zeros(&self) -> Vec<E> {
        self.grad().unwrap_or_else(|| vec![E::zero(); self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[E]) {
        let mut slot = self.inner.grad.lock().unwrap();
        match slot.as_mut() {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += *v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Same value, severed from the graph. Bit-exact copy of the data.
    pub fn detach(&self) -> Tensor<E> {
        Self::build(self.to_vec(), self.shape().clone(), Op::Leaf, false, false)
    }

    /// Convert elementwise to another element type.
    pub fn cast<T: Element>(&self) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|v| T::from_f64(v.as_f64())).collect();
        Tensor::build(data, self.shape().clone(), Op::Leaf, false, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn var_holds_and_zeroes_grad() {
        let x = Tensor::<f64>::var(vec![1.0, 2.0], [2]).unwrap();
        assert!(x.grad().is_none());
        x.accumulate_grad(&[0.5, 0.5]);
        x.accumulate_grad(&[1.0, 1.0]);
        assert_eq!(x.grad().unwrap(), vec![1.5, 1.5]);
        x.zero_grad();
        assert!(x.grad().is_none());
        assert_eq!(x.grad_or_zeros(), vec![0.0, 0.0]);
    }

    #[test]
    fn detach_is_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::randn([3, 4], &mut rng);
        let d = x.detach();
        assert_eq!(x.to_vec(), d.to_vec());
        assert!(!d.requires_grad());
        use rand::SeedableRng;
        let _ = rng;
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(vec![1.0; 5], [2, 3]).is_err());
    }
}
