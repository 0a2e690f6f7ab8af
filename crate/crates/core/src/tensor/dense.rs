use std::sync::Arc;

use crate::scalar::Scalar;
use crate::tensor::graph::NodeRef;
use crate::tensor::TensorError;

/// Row-major n-dimensional array of scalars, optionally tied to a node of a
/// [`Graph`](crate::tensor::Graph).
///
/// Values are shared behind an `Arc`, so clones are cheap and tensors can be
/// read from several threads once built.
#[derive(Clone, Debug)]
pub struct DenseTensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    node: Option<NodeRef>,
}

impl<T: Scalar> DenseTensor<T> {
    /// Builds a constant tensor. Fails if `shape` does not describe exactly
    /// `values.len()` elements or contains a zero extent.
    pub fn from_values(shape: &[usize], values: Vec<T>) -> Result<Self, TensorError> {
        if shape.contains(&0) && !values.is_empty() {
            return Err(TensorError::ShapeMismatch {
                shape: shape.to_vec(),
                len: values.len(),
            });
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(TensorError::ShapeMismatch {
                shape: shape.to_vec(),
                len: values.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(values),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![T::zero(); n]),
            node: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: Arc::new(vec![value]),
            node: None,
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<Vec<T>>, node: Option<NodeRef>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data, node }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn shared(&self) -> &Arc<Vec<T>> {
        &self.data
    }

    pub fn node(&self) -> Option<NodeRef> {
        self.node
    }

    /// True if the tensor participates in a differentiation graph.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Copy of the values without the graph link.
    pub fn detach(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Value at a multi-index. Panics on rank or bound violations.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {i} out of bounds for extent {d}");
            flat = flat * d + i;
        }
        self.data[flat]
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Same values viewed under a new shape; keeps the graph link because
    /// gradients are stored flat.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(TensorError::ShapeMismatch {
                shape: shape.to_vec(),
                len: self.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            node: self.node,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows x columns view for rank-2 tensors.
    pub fn dims2(&self) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::Rank {
                expected: 2,
                shape: s.to_vec(),
            }),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize), TensorError> {
        match self.shape.as_slice() {
            [a, b, c] => Ok((*a, *b, *c)),
            s => Err(TensorError::Rank {
                expected: 3,
                shape: s.to_vec(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_major_indexing() {
        let t = DenseTensor::from_values(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.at(&[1, 0]), 3.0);
        assert!(!t.requires_grad());
    }

    #[test]
    fn zero_tensor_sums_to_zero() {
        let t = DenseTensor::from_values(&[3], vec![0.0f64; 3]).unwrap();
        assert_eq!(t.sum(), 0.0);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let err = DenseTensor::from_values(&[2, 3], vec![0.0f64; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn reshape_keeps_values() {
        let t = DenseTensor::from_values(&[2, 3], (0..6).map(f64::from).collect()).unwrap();
        let r = t.reshape(&[3, 2]).unwrap();
        assert_eq!(r.at(&[2, 1]), 5.0);
        assert!(t.reshape(&[4, 2]).is_err());
    }
}
