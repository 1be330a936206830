//! Dense `f32` tensors with define-by-run reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable value: shape, row-major data and, for
//! trainable leaves, a shared gradient slot. Operations live on a [`Tape`],
//! which records a node for every output that depends on a tensor with
//! `requires_grad`. [`Tape::backward`] walks the recorded nodes in reverse
//! order and accumulates gradients into the slots of the leaves it reaches.
//!
//! ```
//! use trikd::tensor::{Tape, Tensor};
//!
//! let w = Tensor::parameter(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
//! let x = Tensor::from_vec(vec![3], vec![4.0, 5.0, 6.0]).unwrap();
//! let tape = Tape::new();
//! let loss = tape.sum(&tape.mul(&w, &x).unwrap()).unwrap();
//! tape.backward(&loss).unwrap();
//! assert_eq!(w.grad().unwrap(), vec![4.0, 5.0, 6.0]);
//! ```

mod kernels;
mod ops;
mod tape;

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

pub use tape::Tape;

/// Smallest probability ever passed to `log` by the loss functions.
pub const PROB_FLOOR: f32 = 1e-12;

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Sets the number of threads used inside a single matmul. Results are
/// bitwise identical for every thread count.
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} elements but {actual} values were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("log of non-positive value {value} at index {index}")]
    NonPositiveLog { index: usize, value: f32 },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tensor is not recorded on this tape")]
    NotOnTape,
    #[error("zero-sized dimension in shape {0:?}")]
    ZeroDim(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) type GradSlot = Arc<Mutex<Option<Vec<f32>>>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub tape: u64,
    pub index: usize,
}

/// Dense row-major tensor of `f32`.
///
/// Cloning is shallow: the clone shares data and, for parameters, the
/// gradient slot. Use [`Tensor::deep_clone`] for an independent copy.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    requires_grad: bool,
    grad: Option<GradSlot>,
    node: Option<NodeRef>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Self {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
            node: None,
        })
    }

    /// A trainable leaf: `requires_grad` is set and a gradient slot is
    /// attached.
    pub fn parameter(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let mut t = Self::from_vec(shape, data)?;
        t.requires_grad = true;
        t.grad = Some(Arc::new(Mutex::new(None)));
        Ok(t)
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_vec(Vec::new(), vec![value]).expect("scalar shape")
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![0.0; n])
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f32>, node: Option<NodeRef>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            requires_grad: node.is_some(),
            data: Arc::new(data),
            grad: None,
            node,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data.as_ref().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.is_none()
    }

    /// Accumulated gradient, if any backward pass reached this leaf.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.grad
            .as_ref()
            .and_then(|slot| slot.lock().expect("grad lock").clone())
    }

    pub fn zero_grad(&self) {
        if let Some(slot) = &self.grad {
            *slot.lock().expect("grad lock") = None;
        }
    }

    /// Same data, cut from every graph.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            requires_grad: false,
            grad: None,
            node: None,
        }
    }

    /// Independent copy with a fresh (empty) gradient slot.
    pub fn deep_clone(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.as_ref().clone()),
            requires_grad: self.requires_grad,
            grad: self.grad.as_ref().map(|_| Arc::new(Mutex::new(None))),
            node: self.node,
        }
    }

    /// Replaces the parameter values in place. Copies only if a live tape
    /// still references the old buffer.
    pub fn update_data(&mut self, f: impl FnOnce(&mut [f32])) {
        f(Arc::make_mut(&mut self.data).as_mut_slice());
    }

    /// Turns a parameter into a frozen constant.
    pub fn freeze(&mut self) {
        self.requires_grad = false;
        self.grad = None;
    }

    pub(crate) fn node(&self) -> Option<NodeRef> {
        self.node
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f32>> {
        Arc::clone(&self.data)
    }

    pub(crate) fn grad_slot(&self) -> Option<&GradSlot> {
        self.grad.as_ref()
    }

    /// Row-wise argmax of a `[rows × cols]` tensor; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        let (rows, cols) = self.dims2("argmax_rows")?;
        Ok((0..rows)
            .map(|r| {
                let row = &self.data[r * cols..(r + 1) * cols];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[r * cols..(r + 1) * cols]
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(TensorError::ZeroDim(shape.to_vec()));
    }
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(TensorError::DataLength {
            shape: shape.to_vec(),
            expected,
            actual: len,
        });
    }
    Ok(())
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f32> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}
