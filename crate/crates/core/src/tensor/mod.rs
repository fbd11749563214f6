//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted dense array (f32 or IEEE
//! binary16) with an optional gradient slot. Operations are recorded on a
//! [`Graph`] tape; [`Graph::backward`] replays the tape in reverse and fills
//! the gradient slots of `requires_grad` leaves.

pub mod graph;
pub mod kernels;
pub mod ops;

pub use graph::{Compute, GradStore, Graph};

use half::f16;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use thiserror::Error;

/// Element storage format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    F16,
}

impl DType {
    /// Bytes per element.
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
        }
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward was already called on this graph recording")]
    GraphConsumed,
}

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

#[derive(Clone, Debug)]
enum Storage {
    F32(Vec<f32>),
    F16(Vec<f16>),
}

#[derive(Debug)]
struct Inner {
    id: usize,
    shape: Vec<usize>,
    data: Storage,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f32>>>,
}

/// Immutable dense tensor. Cloning is cheap (reference-counted); only the
/// gradient slot is interior-mutable, written by the backward pass.
#[derive(Clone, Debug)]
pub struct Tensor(Arc<Inner>);

impl Tensor {
    fn new(shape: Vec<usize>, data: Storage, requires_grad: bool) -> Self {
        let count = shape.iter().product::<usize>();
        let len = match &data {
            Storage::F32(v) => v.len(),
            Storage::F16(v) => v.len(),
        };
        assert_eq!(count, len, "element count must equal product of extents");
        assert!(shape.iter().all(|&e| e > 0), "extents must be positive");
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
        }))
    }

    /// Builds an f32 tensor from raw data.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Self {
        Self::new(shape.to_vec(), Storage::F32(data), false)
    }

    /// Builds an f32 tensor that participates in gradient computation.
    pub fn param(shape: &[usize], data: Vec<f32>) -> Self {
        Self::new(shape.to_vec(), Storage::F32(data), true)
    }

    /// Builds an f16 tensor from f32 values (round-to-nearest-even).
    pub fn from_vec_f16(shape: &[usize], data: &[f32]) -> Self {
        let half: Vec<f16> = data.iter().map(|&v| f16::from_f32(v)).collect();
        Self::new(shape.to_vec(), Storage::F16(half), false)
    }

    /// All-zero f32 tensor.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_vec(shape, vec![0.0; shape.iter().product()])
    }

    /// Scalar (shape `[1]`) f32 tensor.
    pub fn scalar(v: f32) -> Self {
        Self::from_vec(&[1], vec![v])
    }

    /// A copy of this tensor with gradient tracking off (same values).
    pub fn detached(&self) -> Self {
        Self::new(self.0.shape.clone(), self.0.data.clone(), false)
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn dtype(&self) -> DType {
        match &self.0.data {
            Storage::F32(_) => DType::F32,
            Storage::F16(_) => DType::F16,
        }
    }

    pub fn element_count(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Borrows f32 storage. Panics on f16 tensors (internal misuse).
    pub fn data_f32(&self) -> &[f32] {
        match &self.0.data {
            Storage::F32(v) => v,
            Storage::F16(_) => panic!("expected f32 storage"),
        }
    }

    /// Borrows f16 storage. Panics on f32 tensors (internal misuse).
    pub fn data_f16(&self) -> &[f16] {
        match &self.0.data {
            Storage::F16(v) => v,
            Storage::F32(_) => panic!("expected f16 storage"),
        }
    }

    /// Contents widened to f32 regardless of storage dtype.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.0.data {
            Storage::F32(v) => v.clone(),
            Storage::F16(v) => v.iter().map(|h| h.to_f32()).collect(),
        }
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.element_count(), 1, "item() on non-scalar tensor");
        self.to_f32_vec()[0]
    }

    /// Snapshot of the gradient, if the backward pass has produced one.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.grad.lock().unwrap().clone()
    }

    /// Clears the gradient slot.
    pub fn zero_grad(&self) {
        *self.0.grad.lock().unwrap() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f32]) {
        let mut slot = self.0.grad.lock().unwrap();
        match slot.as_mut() {
            Some(existing) => {
                for (e, &v) in existing.iter_mut().zip(g) {
                    *e += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Little-endian byte serialization of the raw element buffer.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match &self.0.data {
            Storage::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Storage::F16(v) => v.iter().flat_map(|h| h.to_le_bytes()).collect(),
        }
    }

    /// Rebuilds a tensor from `to_le_bytes` output.
    pub fn from_le_bytes(shape: &[usize], dtype: DType, bytes: &[u8]) -> Option<Self> {
        let count: usize = shape.iter().product();
        if bytes.len() != count * dtype.size() {
            return None;
        }
        Some(match dtype {
            DType::F32 => {
                let data = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                Self::new(shape.to_vec(), Storage::F32(data), false)
            }
            DType::F16 => {
                let data = bytes
                    .chunks_exact(2)
                    .map(|c| f16::from_le_bytes([c[0], c[1]]))
                    .collect();
                Self::new(shape.to_vec(), Storage::F16(data), false)
            }
        })
    }

    /// True when every element is finite (no NaN, no ±Inf).
    pub fn all_finite(&self) -> bool {
        match &self.0.data {
            Storage::F32(v) => v.iter().all(|x| x.is_finite()),
            Storage::F16(v) => v.iter().all(|h| h.to_f32().is_finite()),
        }
    }
}

/// Debug/test-build guard: public operations must not emit NaN or ±Inf.
#[inline]
pub(crate) fn debug_check_finite(op: &'static str, t: &Tensor) {
    #[cfg(debug_assertions)]
    {
        debug_assert!(t.all_finite(), "non-finite value produced by op `{op}`");
    }
    #[cfg(not(debug_assertions))]
    {
        let _ = (op, t);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_and_accessors() {
        let t = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.dtype(), DType::F32);
        assert_eq!(t.element_count(), 6);
        assert!(!t.requires_grad());
        assert!(t.grad().is_none());
    }

    #[test]
    #[should_panic(expected = "element count")]
    fn element_count_checked() {
        let _ = Tensor::from_vec(&[2, 2], vec![1.0]);
    }

    #[test]
    fn ids_are_unique() {
        let a = Tensor::scalar(1.0);
        let b = Tensor::scalar(1.0);
        assert_ne!(a.id(), b.id());
    }

    #[test]
    fn f16_round_trips_through_bytes() {
        let t = Tensor::from_vec_f16(&[3], &[0.5, -1.25, 3.0]);
        let bytes = t.to_le_bytes();
        let back = Tensor::from_le_bytes(&[3], DType::F16, &bytes).unwrap();
        assert_eq!(back.to_f32_vec(), t.to_f32_vec());
    }

    #[test]
    fn grad_accumulates() {
        let t = Tensor::param(&[2], vec![0.0, 0.0]);
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[0.5, 0.5]);
        assert_eq!(t.grad().unwrap(), vec![1.5, 2.5]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }
}
