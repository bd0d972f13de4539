//! Dense row-major tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tensor`] is a cheap reference-counted handle. Operations are methods on
//! [`Tape`]; an operation is recorded only when at least one input is tracked,
//! so inference over untracked weights never retains activations.

mod kernels;
mod ops;
mod tape;

use std::cell::{Ref, RefCell};
use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::rc::Rc;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use kernels::sigmoid;
pub use tape::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Element type of a tensor. Training runs in `f32`; gradient checks in `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a·b + beta * c` over arbitrarily strided operands.
    ///
    /// # Safety
    /// Every index reachable through the given extents and strides must lie
    /// inside the corresponding allocation, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn to_le_bytes_into(self, out: &mut Vec<u8>);
    fn from_le_slice(bytes: &[u8]) -> Self;

    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn to_le_bytes_into(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le_slice(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn to_le_bytes_into(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le_slice(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

struct Inner<T> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    tracked: bool,
}

/// Shared handle to a dense row-major array.
///
/// Cloning a `Tensor` clones the handle, not the data. Values are fixed after
/// construction except through [`Tensor::assign`], which the optimizer uses to
/// update parameters in place so that every holder of the handle sees the new
/// weights.
pub struct Tensor<T: Scalar = f32> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("tracked", &self.inner.tracked)
            .finish_non_exhaustive()
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::Validation(format!(
            "tensor extents must be positive, got {shape:?}"
        )));
    }
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(Error::Validation(format!(
            "shape {shape:?} needs {expected} values, got {len}"
        )));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, tracked: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                tracked,
            }),
        }
    }

    /// Untracked constant.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_len(shape, data.len())?;
        Ok(Self::build(shape.to_vec(), data, false))
    }

    /// Tracked leaf that accumulates gradient.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_len(shape, data.len())?;
        Ok(Self::build(shape.to_vec(), data, true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::build(shape.to_vec(), vec![T::zero(); n], false)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::build(shape.to_vec(), vec![value; n], false)
    }

    pub fn scalar(value: T) -> Self {
        Self::build(vec![1], vec![value], false)
    }

    /// Same values, marked as a tracked leaf.
    pub fn into_param(self) -> Self {
        let data = self.to_vec();
        Self::build(self.inner.shape.clone(), data, true)
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<T>, tracked: bool) -> Self {
        Self::build(shape, data, tracked)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn is_tracked(&self) -> bool {
        self.inner.tracked
    }

    pub fn data(&self) -> Ref<'_, [T]> {
        Ref::map(self.inner.data.borrow(), |v| v.as_slice())
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data.borrow()[0])
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub(crate) fn grad_ref(&self) -> Ref<'_, Option<Vec<T>>> {
        self.inner.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        if !self.inner.tracked {
            return;
        }
        debug_assert_eq!(g.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Same values, never tracked: gradients cannot flow through the result.
    pub fn detach(&self) -> Self {
        Self::build(self.inner.shape.clone(), self.to_vec(), false)
    }

    /// Overwrites the values in place. Every clone of this handle observes
    /// the change.
    pub fn assign(&self, values: &[T]) -> Result<()> {
        let mut data = self.inner.data.borrow_mut();
        if values.len() != data.len() {
            return Err(Error::Dimension {
                op: "assign",
                lhs: self.inner.shape.clone(),
                rhs: vec![values.len()],
            });
        }
        data.copy_from_slice(values);
        Ok(())
    }

    pub fn update(&self, f: impl FnOnce(&mut [T])) {
        f(self.inner.data.borrow_mut().as_mut_slice());
    }

    pub fn ptr_eq(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }
}
