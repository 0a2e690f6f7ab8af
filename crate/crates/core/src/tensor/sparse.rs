use std::collections::HashMap;
use std::sync::Arc;

use crate::scalar::Scalar;
use crate::tensor::dense::DenseTensor;
use crate::tensor::TensorError;

/// Integer voxel coordinate `(x, y, z)`.
pub type Coord = [i32; 3];

/// Unique voxel coordinates with an exact coordinate-to-row index.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordSet {
    coords: Vec<Coord>,
    index: HashMap<Coord, usize>,
    lattice: [usize; 3],
}

impl CoordSet {
    pub fn new(coords: Vec<Coord>, lattice: [usize; 3]) -> Result<Self, TensorError> {
        let mut index = HashMap::with_capacity(coords.len());
        for (row, &c) in coords.iter().enumerate() {
            let inside = c
                .iter()
                .zip(lattice)
                .all(|(&v, extent)| v >= 0 && (v as usize) < extent);
            if !inside {
                return Err(TensorError::OutOfBounds { coord: c, lattice });
            }
            if index.insert(c, row).is_some() {
                return Err(TensorError::DuplicateCoordinate(c));
            }
        }
        Ok(Self {
            coords,
            index,
            lattice,
        })
    }

    pub fn empty(lattice: [usize; 3]) -> Self {
        Self {
            coords: Vec::new(),
            index: HashMap::new(),
            lattice,
        }
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn lattice(&self) -> [usize; 3] {
        self.lattice
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn lookup(&self, c: Coord) -> Option<usize> {
        self.index.get(&c).copied()
    }

    /// Row-major linear position inside the lattice.
    pub fn linear(&self, c: Coord) -> usize {
        let [_, w, h] = self.lattice;
        (c[0] as usize * w + c[1] as usize) * h + c[2] as usize
    }
}

/// Feature rows attached to a set of active voxels.
///
/// `features` is an `n x channels` matrix whose row `i` belongs to
/// `coords()[i]`. Coordinate sets are shared behind an `Arc` so that layers
/// preserving the active set (submanifold convolutions) reuse them.
#[derive(Debug, Clone)]
pub struct SparseVoxelTensor<T> {
    coords: Arc<CoordSet>,
    features: DenseTensor<T>,
}

impl<T: Scalar> SparseVoxelTensor<T> {
    /// Validates coordinates (unique, inside `lattice`) and attaches features.
    pub fn from_points(coords: Vec<Coord>, features: DenseTensor<T>, lattice: [usize; 3]) -> Result<Self, TensorError> {
        let set = CoordSet::new(coords, lattice)?;
        Self::new(Arc::new(set), features)
    }

    pub fn new(coords: Arc<CoordSet>, features: DenseTensor<T>) -> Result<Self, TensorError> {
        let (rows, _) = features.dims2()?;
        if rows != coords.len() {
            return Err(TensorError::Incompatible {
                op: "sparse tensor",
                detail: format!("{rows} feature rows for {} coordinates", coords.len()),
            });
        }
        Ok(Self { coords, features })
    }

    pub fn empty(lattice: [usize; 3], channels: usize) -> Self {
        Self {
            coords: Arc::new(CoordSet::empty(lattice)),
            features: DenseTensor::zeros(&[0, channels]),
        }
    }

    /// Same active set with replacement features.
    pub fn with_features(&self, features: DenseTensor<T>) -> Result<Self, TensorError> {
        Self::new(Arc::clone(&self.coords), features)
    }

    pub fn coord_set(&self) -> &Arc<CoordSet> {
        &self.coords
    }

    pub fn coords(&self) -> &[Coord] {
        self.coords.coords()
    }

    pub fn lattice(&self) -> [usize; 3] {
        self.coords.lattice()
    }

    pub fn features(&self) -> &DenseTensor<T> {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn lookup(&self, c: Coord) -> Option<usize> {
        self.coords.lookup(c)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.channels();
        &self.features.values()[i * c..(i + 1) * c]
    }

    /// Dense `channels x L x W x H` copy with zeros at inactive voxels.
    pub fn to_dense(&self) -> DenseTensor<T> {
        let [l, w, h] = self.lattice();
        let c = self.channels();
        let vol = l * w * h;
        let mut data = vec![T::zero(); c * vol];
        for (i, &coord) in self.coords().iter().enumerate() {
            let pos = self.coords.linear(coord);
            for (ch, v) in self.row(i).iter().enumerate() {
                data[ch * vol + pos] = *v;
            }
        }
        DenseTensor::from_values(&[c, l, w, h], data).expect("dense shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn feats(rows: usize, c: usize) -> DenseTensor<f64> {
        DenseTensor::from_values(&[rows, c], (0..rows * c).map(|v| v as f64 + 0.5).collect()).unwrap()
    }

    #[test]
    fn lookup_returns_row() {
        let s = SparseVoxelTensor::from_points(vec![[0, 0, 0]], feats(1, 1), [4, 4, 2]).unwrap();
        assert_eq!(s.lookup([0, 0, 0]), Some(0));
        assert_eq!(s.lookup([1, 0, 0]), None);
    }

    #[test]
    fn duplicate_rejected() {
        let err = SparseVoxelTensor::from_points(vec![[0, 0, 0], [0, 0, 0]], feats(2, 1), [4, 4, 2]).unwrap_err();
        assert_eq!(err, TensorError::DuplicateCoordinate([0, 0, 0]));
    }

    #[test]
    fn out_of_bounds_rejected() {
        let err = SparseVoxelTensor::from_points(vec![[5, 0, 0]], feats(1, 1), [4, 4, 2]).unwrap_err();
        assert!(matches!(err, TensorError::OutOfBounds { .. }));
        let err = SparseVoxelTensor::from_points(vec![[0, -1, 0]], feats(1, 1), [4, 4, 2]).unwrap_err();
        assert!(matches!(err, TensorError::OutOfBounds { .. }));
    }

    #[test]
    fn row_count_must_match() {
        assert!(SparseVoxelTensor::from_points(vec![[0, 0, 0]], feats(2, 1), [4, 4, 2]).is_err());
    }

    proptest! {
        #[test]
        fn dense_round_trip(cells in proptest::collection::btree_set((0i32..5, 0i32..4, 0i32..3), 0..20), c in 1usize..4) {
            let coords: Vec<Coord> = cells.iter().map(|&(x, y, z)| [x, y, z]).collect();
            let n = coords.len();
            let s = SparseVoxelTensor::from_points(coords.clone(), feats(n, c), [5, 4, 3]).unwrap();
            let d = s.to_dense();
            prop_assert_eq!(d.shape(), &[c, 5, 4, 3]);
            let mut nonzero = 0;
            for ch in 0..c {
                for x in 0..5 { for y in 0..4 { for z in 0..3 {
                    let v = d.at(&[ch, x, y, z]);
                    match s.lookup([x as i32, y as i32, z as i32]) {
                        Some(row) => { prop_assert_eq!(v, s.row(row)[ch]); nonzero += 1; }
                        None => prop_assert_eq!(v, 0.0),
                    }
                }}}
            }
            prop_assert_eq!(nonzero, n * c);
        }
    }
}
