//! Operator microbenchmarks: parameter and multiply-accumulate counts are
//! exact; timings are wall-clock medians.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kitti::{Point, PointCloud};
use crate::nn::{conv2d, AsymResidualBlock, Ctx, Mode, Rulebook, SparseConv3d, SparseConvMode};
use crate::tensor::{CoordSet, DenseTensor, Graph, ParamStore, SparseVoxelTensor, TensorError};
use crate::voxel::{assign_voxels, GridSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub channels: usize,
    pub lattice: [usize; 3],
    pub density: f64,
    pub repeats: usize,
    /// Active-voxel counts for the MAC sweep, taken at `density`.
    pub sweep: Vec<usize>,
    pub conv2d_size: [usize; 3],
    pub points: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            lattice: [32, 32, 8],
            density: 0.1,
            repeats: 5,
            sweep: vec![100, 200, 400, 800, 1600, 3200],
            conv2d_size: [32, 64, 64],
            points: 20_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseBench {
    pub name: String,
    pub kernel_params: usize,
    pub macs: u64,
    pub active: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacSweep {
    pub active: Vec<usize>,
    pub macs: Vec<u64>,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub name: String,
    pub size: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub channels: usize,
    /// Two mirrored 3x1x3 / 1x3x3 pairs, as in the residual block.
    pub asymmetric: SparseBench,
    /// Two 3x3x3 layers at the same width.
    pub full: SparseBench,
    pub param_ratio: f64,
    pub param_ratio_num: usize,
    pub param_ratio_den: usize,
    pub sweep: MacSweep,
    pub conv2d: Timing,
    pub voxelizer: Timing,
}

fn random_coords(rng: &mut ChaCha8Rng, lattice: [usize; 3], count: usize) -> Vec<[i32; 3]> {
    let total: usize = lattice.iter().product();
    let count = count.min(total);
    let mut cells: Vec<usize> = rand::seq::index::sample(rng, total, count).into_vec();
    cells.sort_unstable();
    cells
        .into_iter()
        .map(|i| {
            let z = i % lattice[2];
            let y = (i / lattice[2]) % lattice[1];
            let x = i / (lattice[1] * lattice[2]);
            [x as i32, y as i32, z as i32]
        })
        .collect()
}

fn random_sparse(rng: &mut ChaCha8Rng, lattice: [usize; 3], count: usize, channels: usize) -> SparseVoxelTensor<f64> {
    let coords = random_coords(rng, lattice, count);
    let n = coords.len();
    let f = DenseTensor::from_values(&[n, channels], (0..n * channels).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("shape matches");
    SparseVoxelTensor::from_points(coords, f, lattice).expect("unique in-bounds coords")
}

/// Multiply-accumulates of one sparse convolution: rulebook pairs times
/// `in * out`.
pub fn sparse_conv_macs(rulebook: &Rulebook, inputs: usize, outputs: usize) -> u64 {
    rulebook.pairs.iter().map(|p| p.len() as u64).sum::<u64>() * (inputs * outputs) as u64
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return 0.0;
    }
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

fn time<F: FnMut()>(repeats: usize, mut f: F) -> f64 {
    f();
    median(
        (0..repeats.max(1))
            .map(|_| {
                let t = Instant::now();
                f();
                t.elapsed().as_secs_f64()
            })
            .collect(),
    )
}

/// Least-squares line through `(x, y)` with its coefficient of determination.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - slope * a - intercept).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    (slope, intercept, r2)
}

pub fn run_bench(config: &BenchConfig) -> Result<BenchReport, TensorError> {
    let c = config.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::<f64>::new(config.seed);
    let block = AsymResidualBlock::new(&mut store, "asym", c);
    let full: Vec<SparseConv3d> = (0..2)
        .map(|i| SparseConv3d::new(&mut store, &format!("full{i}"), c, c, [3, 3, 3], SparseConvMode::Submanifold, false, false))
        .collect();
    let active = ((config.lattice.iter().product::<usize>() as f64) * config.density).round() as usize;
    let x = random_sparse(&mut rng, config.lattice, active.max(1), c);
    let set = x.coord_set();

    let macs_of = |convs: &mut dyn Iterator<Item = &SparseConv3d>| -> Result<u64, TensorError> {
        let mut total = 0;
        for conv in convs {
            let rb = Rulebook::build(set, None, conv.kernel, conv.mode)?;
            total += sparse_conv_macs(&rb, conv.in_channels, conv.out_channels);
        }
        Ok(total)
    };
    let asym_macs = macs_of(&mut block.convs())?;
    let full_macs = macs_of(&mut full.iter())?;

    let mode = Mode::Eval;
    let asym_time = time(config.repeats, || {
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store, mode);
        block.forward(&ctx, &x).expect("block runs");
    });
    let full_time = time(config.repeats, || {
        let g = Graph::inference();
        let ctx = Ctx::new(&g, &store, mode);
        let h = full[0].forward(&ctx, &x, None).expect("conv runs");
        full[1].forward(&ctx, &h, None).expect("conv runs");
    });
    let asym_params = block.kernel_weight_count();
    let full_params: usize = full.iter().map(|f| f.kernel_weight_count()).sum();

    // MAC sweep on a single submanifold 3x3x3 layer at fixed density: the
    // lattice grows along x with the active count
    let mut sweep_active = Vec::new();
    let mut sweep_macs = Vec::new();
    for &k in &config.sweep {
        let [_, w, h] = config.lattice;
        let len = ((k as f64 / (config.density * (w * h) as f64)).ceil() as usize).max(1);
        let lattice = [len, w, h];
        let coords = random_coords(&mut rng, lattice, k);
        let n = coords.len();
        let cs = Arc::new(CoordSet::new(coords, lattice)?);
        let rb = Rulebook::build(&cs, None, [3, 3, 3], SparseConvMode::Submanifold)?;
        sweep_active.push(n);
        sweep_macs.push(sparse_conv_macs(&rb, c, c));
    }
    let xs: Vec<f64> = sweep_active.iter().map(|&v| v as f64).collect();
    let ys: Vec<f64> = sweep_macs.iter().map(|&v| v as f64).collect();
    let (slope, intercept, r2) = linear_fit(&xs, &ys);

    let [cc, h, w] = config.conv2d_size;
    let map = DenseTensor::from_values(&[cc, h, w], (0..cc * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let kernel = DenseTensor::from_values(&[cc, cc, 3, 3], (0..cc * cc * 9).map(|_| rng.gen_range(-0.1..0.1)).collect())?;
    let conv2d_time = time(config.repeats, || {
        let g = Graph::<f64>::inference();
        conv2d(&g, &map, &kernel, None, 1, 1).expect("conv2d runs");
    });

    let spec = GridSpec::desk();
    let cloud = PointCloud::new(
        (0..config.points)
            .map(|_| {
                Point::new(
                    rng.gen_range(spec.min[0]..spec.max[0]),
                    rng.gen_range(spec.min[1]..spec.max[1]),
                    rng.gen_range(spec.min[2]..spec.max[2]),
                    rng.gen_range(0.0..1.0),
                )
            })
            .collect(),
    );
    let vox_time = time(config.repeats, || {
        assign_voxels(&cloud, &spec);
    });

    Ok(BenchReport {
        channels: c,
        asymmetric: SparseBench {
            name: "asymmetric 3x1x3+1x3x3 (two mirrored pairs)".into(),
            kernel_params: asym_params,
            macs: asym_macs,
            active: x.len(),
            seconds: asym_time,
        },
        full: SparseBench {
            name: "dual 3x3x3".into(),
            kernel_params: full_params,
            macs: full_macs,
            active: x.len(),
            seconds: full_time,
        },
        param_ratio: asym_params as f64 / full_params as f64,
        param_ratio_num: asym_params,
        param_ratio_den: full_params,
        sweep: MacSweep {
            active: sweep_active,
            macs: sweep_macs,
            slope,
            intercept,
            r2,
        },
        conv2d: Timing {
            name: "conv2d 3x3".into(),
            size: format!("{cc}x{h}x{w}"),
            seconds: conv2d_time,
        },
        voxelizer: Timing {
            name: "assign_voxels".into(),
            size: format!("{} points", config.points),
            seconds: vox_time,
        },
    })
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_of_a_line_is_exact() {
        let (s, i, r2) = linear_fit(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]);
        assert!((s - 2.0).abs() < 1e-12 && (i - 1.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn small_report_parses_back() {
        let cfg = BenchConfig {
            channels: 2,
            lattice: [6, 6, 4],
            repeats: 1,
            sweep: vec![10, 20, 40],
            conv2d_size: [2, 8, 8],
            points: 50,
            ..BenchConfig::default()
        };
        let r = run_bench(&cfg).unwrap();
        assert_eq!(r.param_ratio_num * 3, r.param_ratio_den * 2);
        let back: BenchReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
