use std::fs;
use std::path::{Path, PathBuf};

use crate::kitti::{
    generate_synthetic_scene, read_invalid_mask, read_point_labels, read_scan, read_voxel_labels, IoError, LabelMap,
    PointCloud, Scene, SceneLabelGrid, SynthConfig,
};
use crate::voxel::GridSpecError;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub cloud: PointCloud,
    /// One label per point of `cloud`; needed for segmentation supervision.
    pub point_labels: Option<Vec<u8>>,
    pub grid: SceneLabelGrid,
    pub invalid: Vec<bool>,
}

impl Sample {
    pub fn from_scene(name: impl Into<String>, scene: Scene) -> Self {
        Self {
            name: name.into(),
            cloud: scene.cloud,
            point_labels: Some(scene.point_labels),
            grid: scene.grid,
            invalid: scene.invalid,
        }
    }
}

/// Scenes for seeds `first_seed..first_seed + count`.
pub fn synthetic_samples(config: &SynthConfig, first_seed: u64, count: usize) -> Result<Vec<Sample>, GridSpecError> {
    (first_seed..first_seed + count as u64)
        .map(|seed| Ok(Sample::from_scene(format!("synth-{seed:06}"), generate_synthetic_scene(seed, config)?)))
        .collect()
}

/// Reads `velodyne/<stem>.bin`, `voxels/<stem>.label`, and when present
/// `voxels/<stem>.invalid` and `labels/<stem>.label`, for every scan stem
/// that has voxel labels. Stems are sorted.
pub fn load_kitti_dir(root: &Path, extents: [usize; 3], map: &LabelMap) -> Result<Vec<Sample>, IoError> {
    let voxels = root.join("voxels");
    let listing = fs::read_dir(&voxels).map_err(|source| IoError::Io {
        path: voxels.clone(),
        source,
    })?;
    let mut stems = Vec::new();
    for entry in listing {
        let path = entry
            .map_err(|source| IoError::Io {
                path: voxels.clone(),
                source,
            })?
            .path();
        if path.extension().is_some_and(|e| e == "label") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    let n: usize = extents.iter().product();
    stems
        .into_iter()
        .map(|stem| {
            let file = |dir: &str, ext: &str| -> PathBuf { root.join(dir).join(format!("{stem}.{ext}")) };
            let cloud = read_scan(file("velodyne", "bin"))?;
            let grid = read_voxel_labels(file("voxels", "label"), extents, map)?;
            let invalid_path = file("voxels", "invalid");
            let invalid = if invalid_path.exists() {
                read_invalid_mask(&invalid_path, extents)?
            } else {
                vec![false; n]
            };
            let labels_path = file("labels", "label");
            let point_labels = if labels_path.exists() {
                let labels = read_point_labels(&labels_path, map)?;
                if labels.len() != cloud.len() {
                    return Err(IoError::LabelMap(format!(
                        "{}: {} labels for {} points",
                        labels_path.display(),
                        labels.len(),
                        cloud.len()
                    )));
                }
                Some(labels)
            } else {
                None
            };
            Ok(Sample {
                name: stem,
                cloud,
                point_labels,
                grid,
                invalid,
            })
        })
        .collect()
}
