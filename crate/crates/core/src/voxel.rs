//! Cartesian voxelization and the shared point MLP with per-column and
//! per-voxel max pooling.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::kitti::PointCloud;
use crate::nn::{BatchNorm, Ctx, Layout, Linear};
use crate::scalar::Scalar;
use crate::tensor::{Coord, CoordSet, DenseTensor, ParamId, ParamStore, SparseVoxelTensor, TensorError};

/// Half-open axis-aligned range `[min, max)` split into cubic voxels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub voxel_size: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GridSpecError {
    #[error("voxel size {0} must be positive and finite")]
    VoxelSize(f64),
    #[error("axis {axis}: range [{min}, {max}) is not a positive whole number of {voxel_size} m voxels")]
    Extent { axis: usize, min: f64, max: f64, voxel_size: f64 },
}

impl GridSpec {
    /// 0.2 m voxels over `[0, 51.2] x [-25.6, 25.6] x [-2, 4.4]`: 256 x 256 x 32.
    pub fn full_scale() -> Self {
        Self {
            min: [0.0, -25.6, -2.0],
            max: [51.2, 25.6, 4.4],
            voxel_size: 0.2,
        }
    }

    /// 0.2 m voxels over `[0, 12.8] x [-6.4, 6.4] x [0, 1.6]`: 64 x 64 x 8.
    pub fn desk() -> Self {
        Self {
            min: [0.0, -6.4, 0.0],
            max: [12.8, 6.4, 1.6],
            voxel_size: 0.2,
        }
    }

    pub fn validate(&self) -> Result<[usize; 3], GridSpecError> {
        let vs = self.voxel_size;
        if !(vs > 0.0 && vs.is_finite()) {
            return Err(GridSpecError::VoxelSize(vs));
        }
        let mut out = [0; 3];
        for axis in 0..3 {
            let n = (self.max[axis] - self.min[axis]) / vs;
            let r = n.round();
            if !(r >= 1.0 && (n - r).abs() < 1e-6) {
                return Err(GridSpecError::Extent {
                    axis,
                    min: self.min[axis],
                    max: self.max[axis],
                    voxel_size: vs,
                });
            }
            out[axis] = r as usize;
        }
        Ok(out)
    }

    /// `(L, W, H)`. Panics on an invalid spec; use [`validate`](Self::validate) first.
    pub fn extents(&self) -> [usize; 3] {
        self.validate().expect("valid grid spec")
    }

    pub fn voxel_of(&self, p: [f64; 3]) -> Option<Coord> {
        let ext = self.extents();
        let mut c = [0i32; 3];
        for a in 0..3 {
            if !(p[a] >= self.min[a] && p[a] < self.max[a]) {
                return None;
            }
            let i = ((p[a] - self.min[a]) / self.voxel_size).floor();
            // guards rounding right below max
            if i < 0.0 || i as usize >= ext[a] {
                return None;
            }
            c[a] = i as i32;
        }
        Some(c)
    }

    pub fn center(&self, c: Coord) -> [f64; 3] {
        [0, 1, 2].map(|a| self.min[a] + (c[a] as f64 + 0.5) * self.voxel_size)
    }
}

/// Points that fell inside the grid.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VoxelAssignment {
    /// Index into the input cloud for each kept point.
    pub source: Vec<usize>,
    pub voxels: Vec<Coord>,
    /// `(dx, dy, dz, x, y, z, r)` with offsets from the voxel centre.
    pub features: Vec<[f64; 7]>,
}

impl VoxelAssignment {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }
}

pub fn assign_voxels(cloud: &PointCloud, spec: &GridSpec) -> VoxelAssignment {
    let mut out = VoxelAssignment::default();
    for (i, p) in cloud.points.iter().enumerate() {
        let xyz = p.xyz();
        let Some(c) = spec.voxel_of(xyz) else { continue };
        let ctr = spec.center(c);
        out.source.push(i);
        out.voxels.push(c);
        out.features.push([xyz[0] - ctr[0], xyz[1] - ctr[1], xyz[2] - ctr[2], xyz[0], xyz[1], xyz[2], p.r]);
    }
    out
}

/// Groups point indices by key; groups ordered by key, members ascending.
fn group_by<K: Ord + Copy>(keys: impl Iterator<Item = K>) -> (Vec<K>, Vec<Vec<usize>>) {
    let mut map: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.enumerate() {
        map.entry(k).or_default().push(i);
    }
    map.into_iter().unzip()
}

/// Shared point MLP `M` (7 -> 32 -> C_f, BN + ReLU after each linear layer)
/// with reducers `A1` (columns) and `A2` (voxels), each linear + ReLU.
#[derive(Debug)]
pub struct PillarEncoder {
    pub mlp: [(Linear, BatchNorm); 2],
    pub reduce_bev: Linear,
    pub reduce_voxel: Option<Linear>,
    pub channels: usize,
    invocations: Cell<usize>,
}

pub const POINT_FEATURES: usize = 7;
pub const MLP_HIDDEN: usize = 32;

/// Per-point MLP outputs together with the assignment they came from.
pub struct PointEmbedding<T> {
    pub features: DenseTensor<T>,
    pub voxels: Vec<Coord>,
}

impl PillarEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, voxel_branch: bool) -> Self {
        let l0 = Linear::new(store, &format!("{name}.mlp0"), POINT_FEATURES, MLP_HIDDEN, true);
        let b0 = BatchNorm::new(store, &format!("{name}.mlp0.bn"), MLP_HIDDEN);
        let l1 = Linear::new(store, &format!("{name}.mlp1"), MLP_HIDDEN, channels, true);
        let b1 = BatchNorm::new(store, &format!("{name}.mlp1.bn"), channels);
        Self {
            mlp: [(l0, b0), (l1, b1)],
            reduce_bev: Linear::new(store, &format!("{name}.a1"), channels, channels, true),
            reduce_voxel: voxel_branch.then(|| Linear::new(store, &format!("{name}.a2"), channels, channels, true)),
            channels,
            invocations: Cell::new(0),
        }
    }

    /// Number of points pushed through `M` so far.
    pub fn mlp_invocations(&self) -> usize {
        self.invocations.get()
    }

    /// Runs `M` once over every kept point.
    pub fn embed<T: Scalar>(&self, ctx: &Ctx<'_, T>, assignment: &VoxelAssignment) -> Result<PointEmbedding<T>, TensorError> {
        let n = assignment.len();
        self.invocations.set(self.invocations.get() + n);
        let raw: Vec<T> = assignment.features.iter().flatten().map(|&v| T::lit(v)).collect();
        let mut h = DenseTensor::from_values(&[n, POINT_FEATURES], raw)?;
        for (lin, bn) in &self.mlp {
            h = lin.forward(ctx, &h)?;
            h = bn.forward(ctx, &h, Layout::Rows)?;
            h = ctx.graph.relu(&h);
        }
        Ok(PointEmbedding {
            features: h,
            voxels: assignment.voxels.clone(),
        })
    }

    /// `A1(max over column)` scattered into a `C_f x L x W` map; empty
    /// columns are zero.
    pub fn encode_bev<T: Scalar>(
        &self,
        ctx: &Ctx<'_, T>,
        emb: &PointEmbedding<T>,
        extents: [usize; 3],
    ) -> Result<DenseTensor<T>, TensorError> {
        let [l, w, _] = extents;
        let c = self.channels;
        if emb.voxels.is_empty() {
            return Ok(DenseTensor::zeros(&[c, l, w]));
        }
        let (cols, groups) = group_by(emb.voxels.iter().map(|v| (v[0], v[1])));
        let pooled = ctx.graph.segment_max(&emb.features, &groups)?;
        let reduced = ctx.graph.relu(&self.reduce_bev.forward(ctx, &pooled)?);
        let plane = l * w;
        let targets: Vec<usize> = cols
            .iter()
            .flat_map(|&(x, y)| (0..c).map(move |ch| ch * plane + x as usize * w + y as usize))
            .collect();
        ctx.graph.scatter_add(&reduced, Arc::new(targets), &[c, l, w])
    }

    /// `A2(max over voxel)` at each occupied voxel, coordinates sorted.
    pub fn encode_voxels<T: Scalar>(
        &self,
        ctx: &Ctx<'_, T>,
        emb: &PointEmbedding<T>,
        extents: [usize; 3],
    ) -> Result<SparseVoxelTensor<T>, TensorError> {
        let reducer = self.reduce_voxel.as_ref().ok_or_else(|| TensorError::Incompatible {
            op: "encode_voxels",
            detail: "encoder built without a voxel reducer".into(),
        })?;
        if emb.voxels.is_empty() {
            return Ok(SparseVoxelTensor::empty(extents, self.channels));
        }
        let (coords, groups) = group_by(emb.voxels.iter().copied());
        let pooled = ctx.graph.segment_max(&emb.features, &groups)?;
        let reduced = ctx.graph.relu(&reducer.forward(ctx, &pooled)?);
        SparseVoxelTensor::new(Arc::new(CoordSet::new(coords, extents)?), reduced)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (lin, bn) in &self.mlp {
            ids.extend(lin.params());
            ids.extend([bn.gamma, bn.beta]);
        }
        ids.extend(self.reduce_bev.params());
        if let Some(r) = &self.reduce_voxel {
            ids.extend(r.params());
        }
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kitti::Point;
    use crate::nn::Mode;
    use crate::tensor::Graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn extents_of_presets() {
        assert_eq!(GridSpec::full_scale().validate().unwrap(), [256, 256, 32]);
        assert_eq!(GridSpec::desk().validate().unwrap(), [64, 64, 8]);
        let bad = GridSpec {
            min: [0.0; 3],
            max: [1.0, 1.0, 0.3],
            voxel_size: 0.2,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn voxel_centre_point() {
        let cloud = PointCloud::new(vec![Point::new(0.1, -25.5, -1.9, 0.3), Point::new(51.3, 0.0, 0.0, 0.0)]);
        let a = assign_voxels(&cloud, &GridSpec::full_scale());
        assert_eq!(a.voxels, vec![[0, 0, 0]]);
        for d in &a.features[0][..3] {
            assert!(d.abs() < 1e-12);
        }
    }

    #[test]
    fn upper_bound_is_excluded() {
        let cloud = PointCloud::new(vec![Point::new(51.2, 0.0, 0.0, 0.0), Point::new(0.0, -25.6, -2.0, 0.0)]);
        let a = assign_voxels(&cloud, &GridSpec::full_scale());
        assert_eq!(a.source, vec![1]);
    }

    #[test]
    fn index_plus_offset_recovers_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = GridSpec::full_scale();
        let pts: Vec<Point> = (0..2000)
            .map(|_| Point::new(rng.gen_range(-5.0..60.0), rng.gen_range(-30.0..30.0), rng.gen_range(-3.0..5.0), rng.gen()))
            .collect();
        let a = assign_voxels(&PointCloud::new(pts.clone()), &spec);
        assert!(!a.is_empty());
        for (k, &i) in a.source.iter().enumerate() {
            let c = spec.center(a.voxels[k]);
            let f = a.features[k];
            for ax in 0..3 {
                assert!(f[ax].abs() <= spec.voxel_size / 2.0 + 1e-12);
                assert!((c[ax] + f[ax] - pts[i].xyz()[ax]).abs() < 1e-9);
            }
        }
    }

    fn encoder() -> (ParamStore<f64>, PillarEncoder) {
        let mut store = ParamStore::new(3);
        let enc = PillarEncoder::new(&mut store, "enc", 8, true);
        (store, enc)
    }

    #[test]
    fn single_point_column() {
        let (store, enc) = encoder();
        let spec = GridSpec::desk();
        let cloud = PointCloud::new(vec![Point::new(3.3, 0.7, 0.5, 0.4)]);
        let a = assign_voxels(&cloud, &spec);
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store, Mode::Eval);
        let emb = enc.embed(&ctx, &a).unwrap();
        let bev = enc.encode_bev(&ctx, &emb, spec.extents()).unwrap();
        let reduced = g.relu(&enc.reduce_bev.forward(&ctx, &emb.features).unwrap());
        let [x, y, _] = a.voxels[0].map(|v| v as usize);
        for ch in 0..8 {
            for cx in 0..64 {
                for cy in 0..64 {
                    let v = bev.at(&[ch, cx, cy]);
                    if (cx, cy) == (x, y) {
                        assert_eq!(v, reduced.values()[ch]);
                    } else {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn empty_cloud() {
        let (store, enc) = encoder();
        let spec = GridSpec::desk();
        let a = assign_voxels(&PointCloud::default(), &spec);
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store, Mode::Train);
        let emb = enc.embed(&ctx, &a).unwrap();
        assert_eq!(enc.encode_bev(&ctx, &emb, spec.extents()).unwrap().sum(), 0.0);
        assert!(enc.encode_voxels(&ctx, &emb, spec.extents()).unwrap().is_empty());
    }
}
