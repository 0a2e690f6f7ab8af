//! SemanticKITTI-style scan, voxel-label and invalid-mask files, plus a
//! synthetic scene generator.
//!
//! Scans are `N x 16` bytes of little-endian `f32` `(x, y, z, r)`. Voxel
//! labels are one little-endian `u16` per voxel, x-major then y then z.
//! Invalid masks pack one bit per voxel in the same order, most significant
//! bit first.

mod io;
mod synth;

pub use io::{
    read_invalid_mask, read_point_labels, read_scan, read_voxel_labels, write_invalid_mask, write_point_labels, write_scan, write_voxel_labels, IoError,
    LabelMap,
};
pub use synth::{generate_synthetic_scene, Scene, SynthConfig};

use serde::{Deserialize, Serialize};

/// Label value for voxels whose state is unknown.
pub const INVALID: u8 = 255;
/// Label value for free space.
pub const EMPTY: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, r: f64) -> Self {
        Self { x, y, z, r }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Dense `L x W x H` grid of class ids: 0 empty, `1..=C` semantic classes,
/// [`INVALID`] unknown.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneLabelGrid {
    extents: [usize; 3],
    labels: Vec<u8>,
    class_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GridError {
    #[error("{len} labels for extents {extents:?}")]
    Length { extents: [usize; 3], len: usize },
    #[error("label {label} at voxel {index} outside 0..={class_count} and not {INVALID}")]
    Label { label: u8, index: usize, class_count: usize },
}

impl SceneLabelGrid {
    pub fn new(extents: [usize; 3], labels: Vec<u8>, class_count: usize) -> Result<Self, GridError> {
        if extents.iter().product::<usize>() != labels.len() {
            return Err(GridError::Length {
                extents,
                len: labels.len(),
            });
        }
        if let Some((index, &label)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l != INVALID && l as usize > class_count)
        {
            return Err(GridError::Label {
                label,
                index,
                class_count,
            });
        }
        Ok(Self {
            extents,
            labels,
            class_count,
        })
    }

    pub fn empty(extents: [usize; 3], class_count: usize) -> Self {
        Self {
            extents,
            labels: vec![EMPTY; extents.iter().product()],
            class_count,
        }
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        let [_, w, h] = self.extents;
        (x * w + y) * h + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, label: u8) {
        debug_assert!(label == INVALID || label as usize <= self.class_count);
        let i = self.index(x, y, z);
        self.labels[i] = label;
    }

    /// Voxels with a semantic label.
    pub fn occupied(&self) -> usize {
        self.labels.iter().filter(|&&l| l != EMPTY && l != INVALID).count()
    }

    /// Mirror about the x and/or y midline.
    pub fn flipped(&self, flip_x: bool, flip_y: bool) -> Self {
        let [l, w, h] = self.extents;
        let mut out = self.clone();
        for x in 0..l {
            for y in 0..w {
                let sx = if flip_x { l - 1 - x } else { x };
                let sy = if flip_y { w - 1 - y } else { y };
                for z in 0..h {
                    out.labels[self.index(x, y, z)] = self.labels[self.index(sx, sy, z)];
                }
            }
        }
        out
    }
}

/// Mirror a per-voxel boolean mask the same way as [`SceneLabelGrid::flipped`].
pub fn flip_mask(mask: &[bool], extents: [usize; 3], flip_x: bool, flip_y: bool) -> Vec<bool> {
    let [l, w, h] = extents;
    let mut out = mask.to_vec();
    for x in 0..l {
        for y in 0..w {
            let sx = if flip_x { l - 1 - x } else { x };
            let sy = if flip_y { w - 1 - y } else { y };
            for z in 0..h {
                out[(x * w + y) * h + z] = mask[(sx * w + sy) * h + z];
            }
        }
    }
    out
}
