use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Whether newly created operations record a backward graph on this thread.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` with graph recording disabled, restoring the previous mode after.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_mode(false, f)
}

/// Runs `f` with graph recording enabled, even inside [`no_grad`]. Needed by
/// computations that differentiate internally.
pub fn enable_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_mode(true, f)
}

pub(crate) fn with_grad_mode<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
    let _restore = Restore(prev);
    f()
}

/// Local derivative rule attached to a recorded operation.
///
/// Implementations express their vector-Jacobian product with tensor ops, so
/// when the engine runs them with recording enabled the result is itself
/// differentiable.
pub(crate) trait Backward<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

pub(crate) struct GradFn<T: Scalar> {
    pub(crate) inputs: Vec<Tensor<T>>,
    pub(crate) op: Box<dyn Backward<T>>,
}

struct Inner<T: Scalar> {
    id: usize,
    data: Arc<[T]>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad_fn: Option<GradFn<T>>,
}

/// Immutable n-dimensional array, row-major, optionally carrying the graph
/// that produced it.
#[derive(Clone)]
pub struct Tensor<T: Scalar> {
    inner: Arc<Inner<T>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn from_parts(
        data: Arc<[T]>,
        shape: Vec<usize>,
        requires_grad: bool,
        grad_fn: Option<GradFn<T>>,
    ) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                data,
                shape,
                requires_grad,
                grad_fn,
            }),
        }
    }

    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(TensorError::Shape(format!(
                "{} elements do not fill shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self::from_parts(data.into(), shape.to_vec(), false, None))
    }

    /// Trainable leaf. Gradients can be requested for it with [`crate::grad`].
    pub fn parameter(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let t = Self::from_vec(data, shape)?;
        Ok(t.into_leaf(true))
    }

    pub fn scalar(v: T) -> Self {
        Self::from_parts(vec![v].into(), Vec::new(), false, None)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::from_parts(vec![v; numel(shape)].into(), shape.to_vec(), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        inputs: Vec<Tensor<T>>,
        op: impl Backward<T> + 'static,
    ) -> Self {
        let track = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if track {
            Self::from_parts(
                data.into(),
                shape,
                true,
                Some(GradFn {
                    inputs,
                    op: Box::new(op),
                }),
            )
        } else {
            Self::from_parts(data.into(), shape, false, None)
        }
    }

    pub(crate) fn raw(data: Vec<T>, shape: Vec<usize>) -> Self {
        Self::from_parts(data.into(), shape, false, None)
    }

    fn into_leaf(self, requires_grad: bool) -> Self {
        Self::from_parts(self.inner.data.clone(), self.inner.shape.clone(), requires_grad, None)
    }

    /// Same values, cut from any graph.
    pub fn detach(&self) -> Self {
        self.clone().into_leaf(false)
    }

    /// Same values as a fresh leaf that gradients can be taken against.
    pub fn detach_requires_grad(&self) -> Self {
        self.clone().into_leaf(true)
    }

    pub fn id(&self) -> usize {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.grad_fn.is_none()
    }

    pub(crate) fn grad_fn(&self) -> Option<&GradFn<T>> {
        self.inner.grad_fn.as_ref()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Converts element type. The result is a graph-free leaf.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data().iter().map(|v| U::lit(v.as_f64())).collect::<Vec<_>>();
        Tensor::raw(data, self.shape().to_vec())
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data().iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.grad_fn().map(|g| g.op.name()))
            .field("data", &preview)
            .finish()
    }
}
