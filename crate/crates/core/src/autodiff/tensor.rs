use std::fmt;
use std::sync::Arc;

use crate::scalar::Scalar;

use super::AutodiffError;

/// Index of a node on a [`Tape`](super::Tape).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub(crate) tape: u64,
    pub(crate) id: NodeId,
}

/// Dense row-major array, optionally attached to a tape node.
///
/// Values are shared behind an `Arc`, so cloning a tensor is cheap and the
/// tape can keep forward values for the backward pass without copying.
#[derive(Clone)]
pub struct Tensor<T> {
    pub(crate) shape: Vec<usize>,
    pub(crate) values: Arc<Vec<T>>,
    pub(crate) node: Option<NodeRef>,
}

impl<T: Scalar> Tensor<T> {
    /// Untracked tensor. Fails when the shape does not match the value count.
    pub fn new(shape: &[usize], values: Vec<T>) -> Result<Self, AutodiffError> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(AutodiffError::Construction {
                shape: shape.to_vec(),
                len: values.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            values: Arc::new(values),
            node: None,
        })
    }

    pub fn scalar(x: T) -> Self {
        Self {
            shape: Vec::new(),
            values: Arc::new(vec![x]),
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], x: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: Arc::new(vec![x; n]),
            node: None,
        }
    }

    /// Column vector `[n, 1]`.
    pub fn column(values: Vec<T>) -> Self {
        let n = values.len();
        Self {
            shape: vec![n, 1],
            values: Arc::new(values),
            node: None,
        }
    }

    /// Row vector `[1, n]`.
    pub fn row(values: Vec<T>) -> Self {
        let n = values.len();
        Self {
            shape: vec![1, n],
            values: Arc::new(values),
            node: None,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut v = vec![T::zero(); n * n];
        for i in 0..n {
            v[i * n + i] = T::one();
        }
        Self {
            shape: vec![n, n],
            values: Arc::new(v),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.values.as_ref().clone()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node.map(|n| n.id)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.values.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.values[0]
    }

    /// Element `[i, j]` of a rank-2 tensor.
    pub fn at(&self, i: usize, j: usize) -> T {
        debug_assert_eq!(self.shape.len(), 2);
        self.values[i * self.shape[1] + j]
    }

    /// Same values, no tape node.
    pub fn detach(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            values: Arc::clone(&self.values),
            node: None,
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[1],
        }
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("values", &self.values)
            .field("tracked", &self.node.is_some())
            .finish()
    }
}
