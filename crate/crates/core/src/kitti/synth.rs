use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Point, PointCloud, SceneLabelGrid, EMPTY};
use crate::voxel::{GridSpec, GridSpecError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Not read from config files; run configs copy the model's grid.
    #[serde(skip)]
    pub grid: GridSpec,
    /// Not read from config files; run configs copy the model's class count.
    #[serde(skip)]
    pub class_count: usize,
    pub objects: usize,
    /// Laser rows, spread evenly over `elevation_deg`.
    pub beams: usize,
    pub elevation_deg: [f64; 2],
    /// Samples per row, spread evenly over `azimuth_deg`.
    pub azimuths: usize,
    pub azimuth_deg: [f64; 2],
    /// Sensor position in metres.
    pub sensor: [f64; 3],
    /// Maximum jitter of a return around its voxel centre, in voxels.
    pub jitter: f64,
    pub reflectance_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::desk(),
            class_count: 10,
            objects: 10,
            beams: 32,
            elevation_deg: [-30.0, 8.0],
            azimuths: 360,
            azimuth_deg: [-75.0, 75.0],
            sensor: [0.0, 0.0, 1.0],
            jitter: 0.4,
            reflectance_noise: 0.02,
        }
    }
}

/// A generated scene: the complete grid, a partial LiDAR sweep of it, and
/// the grid label under each return.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub cloud: PointCloud,
    pub point_labels: Vec<u8>,
    pub grid: SceneLabelGrid,
    pub invalid: Vec<bool>,
}

/// Number of ground classes: road, then sidewalk, then terrain.
pub fn ground_classes(class_count: usize) -> usize {
    (class_count / 3).clamp(1, 3).min(class_count)
}

fn reflectance_of(class: u8, class_count: usize) -> f64 {
    (class as f64 - 0.5) / class_count as f64
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Block,
    Pole,
    Wall,
    Blob,
}

/// Builds the dense scene then ray-casts a sweep from the sensor.
///
/// Layer `z = 0` is ground, split into bands along y (road in the middle,
/// sidewalk, then terrain). Object classes cycle through blocks, poles,
/// walls and blobs standing on the ground. Each ray reports the first
/// occupied voxel it enters, as that voxel's centre plus uniform jitter.
pub fn generate_synthetic_scene(seed: u64, config: &SynthConfig) -> Result<Scene, GridSpecError> {
    let [l, w, h] = config.grid.validate()?;
    let c = config.class_count;
    if c == 0 || c > 254 || h < 2 {
        return Err(GridSpecError::Extent {
            axis: 2,
            min: config.grid.min[2],
            max: config.grid.max[2],
            voxel_size: config.grid.voxel_size,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = SceneLabelGrid::empty([l, w, h], c);

    let ground = ground_classes(c);
    let road = rng.gen_range(w / 6..=w / 4).max(1);
    let walk = rng.gen_range(w / 12..=w / 8).max(1);
    let mid = w as f64 / 2.0;
    for x in 0..l {
        for y in 0..w {
            let d = ((y as f64 + 0.5) - mid).abs();
            let band = if d < road as f64 {
                1
            } else if d < (road + walk) as f64 {
                2
            } else {
                3
            };
            grid.set(x, y, 0, band.min(ground) as u8);
        }
    }

    let object_classes = c - ground;
    let near = ((1.5 / config.grid.voxel_size) as usize).min(l / 2);
    for i in 0..if object_classes == 0 { 0 } else { config.objects } {
        let slot = i % object_classes;
        let class = (ground + 1 + slot) as u8;
        let shape = [Shape::Block, Shape::Pole, Shape::Wall, Shape::Blob][slot % 4];
        let (sx, sy, sz) = match shape {
            Shape::Block => (rng.gen_range(4..=7), rng.gen_range(2..=4), rng.gen_range(2..=4)),
            Shape::Pole => (1, 1, h - 1),
            Shape::Wall => {
                let long = rng.gen_range(6..=14);
                let tall = rng.gen_range(2..=4);
                if rng.gen_bool(0.5) {
                    (1, long, tall)
                } else {
                    (long, 1, tall)
                }
            }
            Shape::Blob => (rng.gen_range(3..=5), rng.gen_range(3..=5), rng.gen_range(2..=4)),
        };
        let (sx, sy, sz) = (sx.min(l - near), sy.min(w), sz.min(h - 1));
        let x0 = rng.gen_range(near..=l - sx);
        let y0 = rng.gen_range(0..=w - sy);
        let blob_z = if matches!(shape, Shape::Blob) { rng.gen_range(1..=(h - sz).max(1)) } else { 1 };
        for x in x0..x0 + sx {
            for y in y0..y0 + sy {
                for z in blob_z..(blob_z + sz).min(h) {
                    let inside = match shape {
                        Shape::Blob => {
                            let q = |v: usize, o: usize, s: usize| {
                                let r = s as f64 / 2.0;
                                ((v - o) as f64 + 0.5 - r) / r
                            };
                            let (a, b, e) = (q(x, x0, sx), q(y, y0, sy), q(z, blob_z, sz));
                            a * a + b * b + e * e <= 1.05
                        }
                        _ => true,
                    };
                    if inside {
                        grid.set(x, y, z, class);
                    }
                }
            }
        }
    }

    let mut points = Vec::new();
    let mut point_labels = Vec::new();
    let vs = config.grid.voxel_size;
    let lerp = |r: [f64; 2], i: usize, n: usize| {
        if n <= 1 {
            (r[0] + r[1]) / 2.0
        } else {
            r[0] + (r[1] - r[0]) * i as f64 / (n - 1) as f64
        }
    };
    for b in 0..config.beams {
        let el = lerp(config.elevation_deg, b, config.beams).to_radians();
        for a in 0..config.azimuths {
            let az = lerp(config.azimuth_deg, a, config.azimuths).to_radians();
            let dir = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
            let Some(hit) = cast(&grid, &config.grid, config.sensor, dir) else { continue };
            let label = grid.get(hit[0], hit[1], hit[2]);
            let ctr = config.grid.center(hit.map(|v| v as i32));
            let j = config.jitter.clamp(0.0, 0.499) * vs;
            let mut p = [0.0; 3];
            for ax in 0..3 {
                p[ax] = ctr[ax] + if j > 0.0 { rng.gen_range(-j..j) } else { 0.0 };
            }
            let noise = if config.reflectance_noise > 0.0 {
                rng.gen_range(-config.reflectance_noise..config.reflectance_noise)
            } else {
                0.0
            };
            let r = (reflectance_of(label, c) + noise).clamp(0.0, 1.0);
            points.push(Point::new(p[0], p[1], p[2], r));
            point_labels.push(label);
        }
    }
    let n = grid.len();
    Ok(Scene {
        cloud: PointCloud::new(points),
        point_labels,
        grid,
        invalid: vec![false; n],
    })
}

/// First occupied voxel along a ray (voxel traversal), if any.
fn cast(grid: &SceneLabelGrid, spec: &GridSpec, origin: [f64; 3], dir: [f64; 3]) -> Option<[usize; 3]> {
    let ext = grid.extents();
    let vs = spec.voxel_size;
    // enter the box
    let mut t_enter = 0.0f64;
    let mut t_exit = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-12 {
            if origin[a] < spec.min[a] || origin[a] >= spec.max[a] {
                return None;
            }
        } else {
            let t0 = (spec.min[a] - origin[a]) / dir[a];
            let t1 = (spec.max[a] - origin[a]) / dir[a];
            t_enter = t_enter.max(t0.min(t1));
            t_exit = t_exit.min(t0.max(t1));
        }
    }
    if t_enter >= t_exit {
        return None;
    }
    let start = [0, 1, 2].map(|a| origin[a] + dir[a] * (t_enter + 1e-9));
    let mut cell = [0i64; 3];
    for a in 0..3 {
        let v = ((start[a] - spec.min[a]) / vs).floor() as i64;
        cell[a] = v.clamp(0, ext[a] as i64 - 1);
    }
    let step = dir.map(|d| if d > 0.0 { 1i64 } else { -1 });
    let mut t_max = [0.0f64; 3];
    let mut t_delta = [0.0f64; 3];
    for a in 0..3 {
        if dir[a].abs() < 1e-12 {
            t_max[a] = f64::INFINITY;
            t_delta[a] = f64::INFINITY;
        } else {
            let boundary = spec.min[a] + (cell[a] + i64::from(step[a] > 0)) as f64 * vs;
            t_max[a] = (boundary - origin[a]) / dir[a];
            t_delta[a] = vs / dir[a].abs();
        }
    }
    loop {
        let c = cell.map(|v| v as usize);
        if grid.get(c[0], c[1], c[2]) != EMPTY {
            return Some(c);
        }
        let a = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        cell[a] += step[a];
        if cell[a] < 0 || cell[a] >= ext[a] as i64 {
            return None;
        }
        t_max[a] += t_delta[a];
    }
}
