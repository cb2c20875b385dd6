//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Storage is row-major and contiguous; there are no views or strides.
//! Every differentiable op records a backward closure on a [`Tape`]; the
//! tape replays closures in exact reverse execution order.
//!
//! Gradients follow an accumulate-then-zero contract: `backward` adds into
//! existing `grad` buffers, and callers zero them explicitly (typically via
//! the optimizer) between steps. Calling `backward` twice without zeroing
//! doubles the gradients.
//!
//! Broadcasting is limited to trailing dimensions: two operands are
//! compatible when (a) their shapes are identical, (b) one of them has a
//! single element (a scalar), or (c) the smaller operand's shape equals a
//! trailing suffix of the larger's, in which case it is tiled over the
//! leading dimensions.
//!
//! Everything here is single-threaded; a `Tensor` and its `Tape` must stay
//! on the thread that created them.

mod kernels;
mod ops;
#[cfg(test)]
mod tests;

pub use ops::{AttnMask, RotaryTable};

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) struct TensorInner {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) grad: Option<Vec<f64>>,
    pub(crate) requires_grad: bool,
    pub(crate) tape: Option<Tape>,
    /// Leaves have no producing op; their gradients persist across sweeps.
    /// Op outputs hand their gradient to the producing entry during the
    /// sweep, so each backward call delivers exactly one dose to the leaves.
    pub(crate) is_leaf: bool,
}

/// Dense n-dimensional f64 array, cheaply cloneable (clones share storage).
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<RefCell<TensorInner>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        assert_eq!(
            numel_of(&shape),
            data.len(),
            "shape {:?} incompatible with {} values",
            shape,
            data.len()
        );
        Tensor {
            inner: Rc::new(RefCell::new(TensorInner {
                shape,
                data,
                grad: None,
                requires_grad: false,
                tape: None,
                is_leaf: true,
            })),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = numel_of(&shape);
        Tensor::from_vec(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Tensor {
        let n = numel_of(&shape);
        Tensor::from_vec(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(vec![1], vec![value])
    }

    /// Leaf tensor that participates in gradient computation on `tape`.
    pub fn param(shape: Vec<usize>, data: Vec<f64>, tape: &Tape) -> Tensor {
        let t = Tensor::from_vec(shape, data);
        {
            let mut inner = t.inner.borrow_mut();
            inner.requires_grad = true;
            inner.tape = Some(tape.clone());
        }
        t
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        let inner = self.inner.borrow();
        assert_eq!(inner.shape.len(), 2, "rows() needs a 2-D tensor");
        inner.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        let inner = self.inner.borrow();
        assert_eq!(inner.shape.len(), 2, "cols() needs a 2-D tensor");
        inner.shape[1]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() needs a single-element tensor");
        inner.data[0]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        let inner = self.inner.borrow();
        assert_eq!(inner.shape.len(), 2);
        inner.data[i * inner.shape[1] + j]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn is_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|v| v.is_finite())
    }

    pub fn grad_vec(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        if let Some(g) = inner.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// In-place parameter update. `f` receives (data, grad); no-op when no
    /// gradient has been accumulated.
    pub fn update_with_grad(&self, f: impl FnOnce(&mut [f64], &[f64])) {
        let mut inner = self.inner.borrow_mut();
        if let Some(grad) = inner.grad.take() {
            f(&mut inner.data, &grad);
            inner.grad = Some(grad);
        }
    }

    /// Overwrite the stored values. Shape must match.
    pub fn set_data(&self, values: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), values.len());
        inner.data.copy_from_slice(values);
    }

    /// New leaf with copied values, cut off from the tape.
    pub fn detach(&self) -> Tensor {
        let inner = self.inner.borrow();
        Tensor::from_vec(inner.shape.clone(), inner.data.clone())
    }

    pub(crate) fn tape(&self) -> Option<Tape> {
        self.inner.borrow().tape.clone()
    }

    pub(crate) fn accum_grad(&self, g: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        if !inner.requires_grad {
            return;
        }
        if inner.grad.is_none() {
            inner.grad = Some(vec![0.0; inner.data.len()]);
        }
        let buf = inner.grad.as_mut().unwrap();
        debug_assert_eq!(buf.len(), g.len());
        for (b, v) in buf.iter_mut().zip(g) {
            *b += v;
        }
    }

    /// Result tensor of an op: inherits tape and grad participation from
    /// `inputs`. Recording is suppressed while the tape is paused.
    pub(crate) fn result_of(inputs: &[&Tensor], shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        let tape = inputs.iter().find_map(|t| t.tape());
        let active = tape.as_ref().map(|t| !t.is_paused()).unwrap_or(false);
        let requires = active && inputs.iter().any(|t| t.requires_grad());
        let out = Tensor::from_vec(shape, data);
        {
            let mut inner = out.inner.borrow_mut();
            inner.requires_grad = requires;
            inner.tape = if requires { tape } else { None };
            inner.is_leaf = false;
        }
        out
    }

    pub(crate) fn record(&self, backward: impl FnMut() + 'static) {
        if let Some(tape) = self.tape() {
            if self.requires_grad() {
                tape.push(Box::new(backward));
            }
        }
    }
}

struct TapeInner {
    entries: Vec<Box<dyn FnMut()>>,
    paused: usize,
}

/// Ordered record of executed ops. Backward traverses entries in exact
/// reverse execution order; the topological order is the execution order.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                entries: Vec::new(),
                paused: 0,
            })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop all recorded entries (gradients on leaves are untouched).
    pub fn clear(&self) {
        self.inner.borrow_mut().entries.clear();
    }

    pub fn is_paused(&self) -> bool {
        self.inner.borrow().paused > 0
    }

    /// Run `f` without recording; used for evaluation passes on a model
    /// whose parameters live on this tape.
    pub fn paused<R>(&self, f: impl FnOnce() -> R) -> R {
        self.inner.borrow_mut().paused += 1;
        let out = f();
        self.inner.borrow_mut().paused -= 1;
        out
    }

    fn push(&self, entry: Box<dyn FnMut()>) {
        self.inner.borrow_mut().entries.push(entry);
    }
}

/// Reverse-mode sweep from a scalar loss. Every leaf with `requires_grad`
/// receives (accumulates) dLoss/dLeaf. Entries stay on the tape, so a second
/// call without zeroing doubles gradients; clear or zero explicitly.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::NonScalarLoss {
            shape: loss.shape(),
        });
    }
    let tape = loss.tape().ok_or(Error::DetachedLoss)?;
    loss.accum_grad(&[1.0]);
    // Closures are replayed newest-first; each reads its output's grad,
    // complete by construction once all later entries have run. The vec is
    // taken out so closures never alias the tape borrow.
    let mut entries = std::mem::take(&mut tape.inner.borrow_mut().entries);
    for entry in entries.iter_mut().rev() {
        entry();
    }
    let mut inner = tape.inner.borrow_mut();
    let appended = std::mem::take(&mut inner.entries);
    inner.entries = entries;
    inner.entries.extend(appended);
    Ok(())
}
