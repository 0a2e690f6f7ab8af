use rand::Rng;

use crate::kitti::{flip_mask, Point, PointCloud, SceneLabelGrid};
use crate::voxel::GridSpec;

/// Mirrors points about the x and/or y midline of the grid range.
pub fn flip_cloud(cloud: &PointCloud, spec: &GridSpec, flip_x: bool, flip_y: bool) -> PointCloud {
    let sx = spec.min[0] + spec.max[0];
    let sy = spec.min[1] + spec.max[1];
    let points = cloud
        .points
        .iter()
        .map(|p| Point {
            x: if flip_x { sx - p.x } else { p.x },
            y: if flip_y { sy - p.y } else { p.y },
            ..*p
        })
        .collect();
    PointCloud::new(points)
}

/// A training sample after augmentation.
#[derive(Clone, Debug)]
pub struct Flipped {
    pub cloud: PointCloud,
    pub grid: SceneLabelGrid,
    pub invalid: Vec<bool>,
    pub flips: (bool, bool),
}

/// Flips about each axis independently with probability 0.5. Per-point
/// labels need no change since point order is kept.
pub fn augment_flip(
    cloud: &PointCloud,
    grid: &SceneLabelGrid,
    invalid: &[bool],
    spec: &GridSpec,
    rng: &mut impl Rng,
) -> Flipped {
    let fx = rng.gen_bool(0.5);
    let fy = rng.gen_bool(0.5);
    apply_flip(cloud, grid, invalid, spec, fx, fy)
}

pub fn apply_flip(
    cloud: &PointCloud,
    grid: &SceneLabelGrid,
    invalid: &[bool],
    spec: &GridSpec,
    flip_x: bool,
    flip_y: bool,
) -> Flipped {
    Flipped {
        cloud: flip_cloud(cloud, spec, flip_x, flip_y),
        grid: grid.flipped(flip_x, flip_y),
        invalid: flip_mask(invalid, grid.extents(), flip_x, flip_y),
        flips: (flip_x, flip_y),
    }
}
