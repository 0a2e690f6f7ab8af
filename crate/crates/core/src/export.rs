//! Plain-text point lists for external viewers: one `x y z r g b label`
//! line per occupied voxel, coordinates in voxel units.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::kitti::{SceneLabelGrid, EMPTY, INVALID};

/// Class id to RGB. Ids without an entry use `fallback`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Palette {
    pub colors: BTreeMap<String, [u8; 3]>,
    #[serde(default = "grey")]
    pub fallback: [u8; 3],
}

fn grey() -> [u8; 3] {
    [128, 128, 128]
}

const DEFAULT_COLORS: [[u8; 3]; 19] = [
    [255, 0, 255],
    [75, 0, 75],
    [255, 150, 255],
    [175, 0, 75],
    [255, 200, 0],
    [100, 150, 245],
    [80, 30, 180],
    [100, 230, 245],
    [30, 60, 150],
    [0, 0, 255],
    [0, 175, 0],
    [135, 60, 0],
    [150, 240, 80],
    [255, 30, 30],
    [255, 40, 200],
    [150, 30, 90],
    [255, 120, 50],
    [255, 240, 150],
    [255, 0, 0],
];

impl Default for Palette {
    fn default() -> Self {
        Self {
            colors: DEFAULT_COLORS
                .iter()
                .enumerate()
                .map(|(i, c)| ((i + 1).to_string(), *c))
                .collect(),
            fallback: grey(),
        }
    }
}

impl Palette {
    pub fn color(&self, class: u8) -> [u8; 3] {
        self.colors.get(&class.to_string()).copied().unwrap_or(self.fallback)
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }
}

/// Occupied means labelled `1..=C`; empty and invalid voxels are skipped.
pub fn export_points(grid: &SceneLabelGrid, palette: &Palette) -> String {
    let [l, w, h] = grid.extents();
    let mut out = String::new();
    for x in 0..l {
        for y in 0..w {
            for z in 0..h {
                let label = grid.get(x, y, z);
                if label == EMPTY || label == INVALID {
                    continue;
                }
                let [r, g, b] = palette.color(label);
                writeln!(out, "{x} {y} {z} {r} {g} {b} {label}").expect("string write");
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_grid_has_no_lines() {
        assert_eq!(export_points(&SceneLabelGrid::empty([3, 3, 2], 4), &Palette::default()), "");
    }

    #[test]
    fn one_line_per_occupied_voxel() {
        let mut g = SceneLabelGrid::empty([3, 3, 2], 4);
        g.set(1, 2, 1, 3);
        g.set(0, 0, 0, INVALID);
        let text = export_points(&g, &Palette::default());
        assert_eq!(text, "1 2 1 255 150 255 3\n");
    }

    #[test]
    fn palette_file() {
        let p = Palette::from_toml("fallback = [1, 2, 3]\n[colors]\n\"2\" = [9, 9, 9]\n").unwrap();
        assert_eq!(p.color(2), [9, 9, 9]);
        assert_eq!(p.color(7), [1, 2, 3]);
        assert!(Palette::from_toml("[colors]\n\"2\" = [300, 0, 0]\n").is_err());
    }
}
