//! The two-branch completion network.
//!
//! Points are voxelized and embedded by a shared MLP. Column max-pooling
//! feeds a 2D UNet over the bird's-eye view whose head predicts `C+1`
//! classes for every height cell at each `(x, y)` (channel `z * (C+1) + k`).
//! Voxel max-pooling feeds a sparse 3D UNet. The 3D encoder outputs after
//! the first three downsamples are stacked along z, reduced to `C_s`
//! channels and concatenated onto the 2D encoder at the same resolution.
//! Everything under the `seg.dec.` prefix (the fourth 3D downsample, the
//! decoder, the context block and the segmentation head) only serves the
//! segmentation loss and is skipped at inference.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::kitti::{PointCloud, SceneLabelGrid};
use crate::nn::{conv2d, upsample2x, AsymDownBlock, AsymUpBlock, Conv2dLayer, Ctx, DdcmBlock, Linear, Mode};
use crate::scalar::Scalar;
use crate::tensor::{Coord, DenseTensor, Graph, ParamId, ParamStore, SparseVoxelTensor, TensorError};
use crate::voxel::{assign_voxels, GridSpec, GridSpecError, PillarEncoder, VoxelAssignment};

pub const LEVELS: usize = 4;
pub const DECODER_PREFIX: &str = "seg.dec.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub grid: GridSpec,
    pub class_count: usize,
    /// `C_f`: point embedding and level-0 width of both branches.
    pub feature_dim: usize,
    /// `C_s`: width of each fused 3D-to-2D feature.
    pub fusion_dim: usize,
    /// 2D widths at levels 1..=4 (after each downsample).
    pub widths_2d: Vec<usize>,
    /// 3D widths at levels 1..=4.
    pub widths_3d: Vec<usize>,
    /// Encoder levels that receive 3D features, each in 1..=3.
    pub fusion_levels: Vec<usize>,
    pub branch_3d: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::desk(),
            class_count: 10,
            feature_dim: 32,
            fusion_dim: 16,
            widths_2d: vec![32, 64, 128, 256],
            widths_3d: vec![32, 64, 128, 256],
            fusion_levels: vec![1, 2, 3],
            branch_3d: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error(transparent)]
    Grid(#[from] GridSpecError),
    #[error("{0}")]
    Invalid(String),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<[usize; 3], ConfigError> {
        let ext = self.grid.validate()?;
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.widths_2d.len() != LEVELS || self.widths_3d.len() != LEVELS {
            return bad(format!("expected {LEVELS} widths per branch"));
        }
        if self.widths_2d.iter().chain(&self.widths_3d).any(|&w| w == 0) || self.feature_dim == 0 {
            return bad("channel widths must be positive".into());
        }
        if self.class_count == 0 || self.class_count > 254 {
            return bad(format!("class count {} outside 1..=254", self.class_count));
        }
        if self.fusion_levels.iter().any(|&l| !(1..LEVELS).contains(&l)) {
            return bad(format!("fusion levels {:?} must lie in 1..{LEVELS}", self.fusion_levels));
        }
        if self.branch_3d && !self.fusion_levels.is_empty() && self.fusion_dim == 0 {
            return bad("fusion dim must be positive".into());
        }
        let div = 1 << LEVELS;
        if ext[0] % div != 0 || ext[1] % div != 0 {
            return bad(format!("L and W must be multiples of {div}, got {ext:?}"));
        }
        Ok(ext)
    }

    fn fused(&self, level: usize) -> bool {
        self.branch_3d && self.fusion_levels.contains(&level)
    }

    /// Canonical TOML text, embedded in checkpoints.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }
}

#[derive(Debug)]
struct Stage2d {
    down: Conv2dLayer,
    refine: Conv2dLayer,
}

#[derive(Debug)]
struct Completion2d {
    stem: Conv2dLayer,
    stages: Vec<Stage2d>,
    ups: Vec<Conv2dLayer>,
    head: Conv2dLayer,
}

#[derive(Debug)]
struct Segmentation3d {
    downs: Vec<AsymDownBlock>,
    ups: Vec<AsymUpBlock>,
    context: DdcmBlock,
    head: Linear,
    /// Per fused level: pointwise conv over the z-stacked features.
    reducers: Vec<(usize, Conv2dLayer)>,
}

/// Network outputs for one scene.
pub struct Outputs<T> {
    /// `(L*W*H) x (C+1)`, rows ordered x, then y, then z.
    pub completion: DenseTensor<T>,
    /// Per occupied input voxel, `C`-way; present when the decoder ran.
    pub segmentation: Option<SparseVoxelTensor<T>>,
    pub assignment: VoxelAssignment,
}

pub struct SsaScModel<T> {
    config: ModelConfig,
    extents: [usize; 3],
    pub store: ParamStore<T>,
    encoder: PillarEncoder,
    completion: Completion2d,
    segmentation: Option<Segmentation3d>,
}

impl<T: Scalar> SsaScModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self, ConfigError> {
        let extents = config.validate()?;
        let mut store = ParamStore::new(config.seed);
        let cf = config.feature_dim;
        let cs = config.fusion_dim;
        let encoder = PillarEncoder::new(&mut store, "pillar", cf, config.branch_3d);

        let mut widths = vec![cf];
        widths.extend(&config.widths_2d);
        // channels of the encoder output at each level, after fusion
        let out_ch = |l: usize| widths[l] + if config.fused(l) { cs } else { 0 };
        let stem = Conv2dLayer::new(&mut store, "bev.stem", cf, cf, 3, 1, true, true);
        let stages = (1..=LEVELS)
            .map(|l| Stage2d {
                down: Conv2dLayer::new(&mut store, &format!("bev.down{l}"), out_ch(l - 1), widths[l], 3, 2, true, true),
                refine: Conv2dLayer::new(&mut store, &format!("bev.refine{l}"), widths[l], widths[l], 3, 1, true, true),
            })
            .collect();
        let ups = (1..=LEVELS)
            .rev()
            .map(|l| {
                let below = if l == LEVELS { out_ch(l) } else { widths[l] };
                Conv2dLayer::new(&mut store, &format!("bev.up{l}"), below + out_ch(l - 1), widths[l - 1], 3, 1, true, true)
            })
            .collect();
        let (_, _, h) = (extents[0], extents[1], extents[2]);
        let head = Conv2dLayer::new(&mut store, "bev.head", cf, h * (config.class_count + 1), 1, 1, false, false);
        let completion = Completion2d { stem, stages, ups, head };

        let segmentation = config.branch_3d.then(|| {
            let mut w3 = vec![cf];
            w3.extend(&config.widths_3d);
            let mut downs = Vec::new();
            for l in 1..=LEVELS {
                let name = if l == LEVELS { format!("{DECODER_PREFIX}down{l}") } else { format!("seg.enc.down{l}") };
                downs.push(AsymDownBlock::new(&mut store, &name, w3[l - 1], w3[l]));
            }
            let ups = (1..=LEVELS)
                .rev()
                .map(|l| AsymUpBlock::new(&mut store, &format!("{DECODER_PREFIX}up{l}"), w3[l], w3[l - 1]))
                .collect();
            let context = DdcmBlock::new(&mut store, &format!("{DECODER_PREFIX}context"), cf);
            let head = Linear::new(&mut store, &format!("{DECODER_PREFIX}head"), cf, config.class_count, true);
            let mut levels: Vec<usize> = config.fusion_levels.clone();
            levels.sort_unstable();
            levels.dedup();
            let reducers = levels
                .into_iter()
                .map(|l| {
                    let hl = level_extents(extents, l)[2];
                    (l, Conv2dLayer::new(&mut store, &format!("fuse{l}"), w3[l] * hl, cs, 1, 1, false, true))
                })
                .collect();
            Segmentation3d {
                downs,
                ups,
                context,
                head,
                reducers,
            }
        });

        Ok(Self {
            config,
            extents,
            store,
            encoder,
            completion,
            segmentation,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn encoder(&self) -> &PillarEncoder {
        &self.encoder
    }

    /// Parameters reachable by the completion output alone.
    pub fn inference_params(&self) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|&id| !self.store.get(id).name.starts_with(DECODER_PREFIX))
            .collect()
    }

    /// Parameters that receive gradients when segmentation supervision is
    /// on (`true`) or off. Without supervision or fusion the 3D encoder and
    /// its voxel reducer are unreachable and left out.
    pub fn trainable_params(&self, segmentation_loss: bool) -> Vec<ParamId> {
        if segmentation_loss && self.segmentation.is_some() {
            return self.store.ids().collect();
        }
        let detached = self.deepest_fused() == 0;
        self.inference_params()
            .into_iter()
            .filter(|&id| {
                let name = &self.store.get(id).name;
                !(detached && (name.starts_with("seg.") || name.starts_with("pillar.a2.")))
            })
            .collect()
    }

    /// Full forward pass. `decoder` runs the segmentation decoder; it has no
    /// effect on the completion output.
    pub fn forward(&self, g: &Graph<T>, cloud: &PointCloud, mode: Mode, decoder: bool) -> Result<Outputs<T>, TensorError> {
        let assignment = assign_voxels(cloud, &self.config.grid);
        self.forward_assigned(g, assignment, mode, decoder)
    }

    pub fn forward_assigned(
        &self,
        g: &Graph<T>,
        assignment: VoxelAssignment,
        mode: Mode,
        decoder: bool,
    ) -> Result<Outputs<T>, TensorError> {
        let ctx = Ctx::new(g, &self.store, mode);
        let emb = self.encoder.embed(&ctx, &assignment)?;
        let bev = self.encoder.encode_bev(&ctx, &emb, self.extents)?;

        // 3D encoder: level-l outputs for fusion, skips for the decoder
        let mut fused: Vec<Option<DenseTensor<T>>> = vec![None; LEVELS + 1];
        let mut seg_state = None;
        if let Some(seg) = &self.segmentation {
            let voxels = self.encoder.encode_voxels(&ctx, &emb, self.extents)?;
            let mut h = voxels;
            let mut skips = Vec::new();
            let deepest = if decoder { LEVELS } else { self.deepest_fused() };
            for l in 1..=deepest {
                let (down, skip) = seg.downs[l - 1].forward(&ctx, &h)?;
                skips.push(skip);
                h = down;
                if let Some((_, red)) = seg.reducers.iter().find(|(fl, _)| *fl == l) {
                    let stacked = z_stack(g, &h)?;
                    fused[l] = Some(red.forward(&ctx, &stacked)?);
                }
            }
            seg_state = Some((h, skips));
        }

        let net = &self.completion;
        let mut x = net.stem.forward(&ctx, &bev)?;
        let mut enc = vec![x.clone()];
        for (i, stage) in net.stages.iter().enumerate() {
            let l = i + 1;
            let d = stage.down.forward(&ctx, &x)?;
            let r = stage.refine.forward(&ctx, &d)?;
            x = g.add(&d, &r)?;
            if let Some(f) = &fused[l] {
                x = g.concat0(&[&x, f])?;
            }
            enc.push(x.clone());
        }
        for (i, up) in net.ups.iter().enumerate() {
            let l = LEVELS - i;
            let u = upsample2x(g, &x)?;
            let cat = g.concat0(&[&u, &enc[l - 1]])?;
            x = up.forward(&ctx, &cat)?;
        }
        let w = ctx.param(net.head.weight);
        let b = ctx.param(net.head.bias);
        let head = conv2d(g, &x, &w, Some(&b), 1, 0)?;
        let completion = self.head_to_rows(g, &head)?;

        let segmentation = match (decoder, &self.segmentation, seg_state) {
            (true, Some(seg), Some((mut h, mut skips))) => {
                for up in &seg.ups {
                    let skip = skips.pop().expect("one skip per level");
                    h = up.forward(&ctx, &h, &skip)?;
                }
                let h = seg.context.forward(&ctx, &h)?;
                let logits = seg.head.forward(&ctx, h.features())?;
                Some(h.with_features(logits)?)
            }
            _ => None,
        };
        Ok(Outputs {
            completion,
            segmentation,
            assignment,
        })
    }

    fn deepest_fused(&self) -> usize {
        self.segmentation
            .as_ref()
            .and_then(|s| s.reducers.iter().map(|(l, _)| *l).max())
            .unwrap_or(0)
    }

    /// `(H*(C+1)) x L x W` head output to `(L*W*H) x (C+1)` rows.
    fn head_to_rows(&self, g: &Graph<T>, head: &DenseTensor<T>) -> Result<DenseTensor<T>, TensorError> {
        let [l, w, h] = self.extents;
        let k = self.config.class_count + 1;
        let view = head.reshape(&[h, k, l, w])?;
        let rows = g.permute(&view, &[2, 3, 0, 1])?;
        rows.reshape(&[l * w * h, k])
    }

    /// Inference graph, running statistics, no segmentation decoder; argmax
    /// per voxel with ties going to the lowest class.
    pub fn forward_infer(&self, cloud: &PointCloud) -> Result<SceneLabelGrid, TensorError> {
        let g = Graph::inference();
        let out = self.forward(&g, cloud, Mode::Eval, false)?;
        Ok(self.predict(&out.completion))
    }

    /// Parameters touched by an inference pass.
    pub fn inference_footprint(&self, cloud: &PointCloud) -> Result<Vec<ParamId>, TensorError> {
        let g = Graph::inference();
        self.forward(&g, cloud, Mode::Eval, false)?;
        Ok(g.used_params())
    }

    pub fn predict(&self, completion: &DenseTensor<T>) -> SceneLabelGrid {
        let k = self.config.class_count + 1;
        let labels = completion.values().chunks_exact(k).map(argmax).collect();
        SceneLabelGrid::new(self.extents, labels, self.config.class_count).expect("argmax within classes")
    }
}

/// First index of the maximum.
pub fn argmax<T: Scalar>(row: &[T]) -> u8 {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best as u8
}

pub fn level_extents(extents: [usize; 3], level: usize) -> [usize; 3] {
    let mut e = extents;
    for _ in 0..level {
        e = e.map(|v| v.div_ceil(2));
    }
    e
}

/// Scatters sparse rows into a `(c*H) x L x W` map, channel `ch*H + z`.
pub fn z_stack<T: Scalar>(g: &Graph<T>, x: &SparseVoxelTensor<T>) -> Result<DenseTensor<T>, TensorError> {
    let [l, w, h] = x.lattice();
    let c = x.channels();
    let plane = l * w;
    let targets: Vec<usize> = x
        .coords()
        .iter()
        .flat_map(|&[cx, cy, cz]: &Coord| {
            (0..c).map(move |ch| (ch * h + cz as usize) * plane + cx as usize * w + cy as usize)
        })
        .collect();
    g.scatter_add(x.features(), Arc::new(targets), &[c * h, l, w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kitti::{generate_synthetic_scene, SynthConfig};

    fn small_config() -> ModelConfig {
        ModelConfig {
            grid: GridSpec {
                min: [0.0, -1.6, 0.0],
                max: [3.2, 1.6, 0.8],
                voxel_size: 0.2,
            },
            class_count: 4,
            feature_dim: 4,
            fusion_dim: 2,
            widths_2d: vec![4, 4, 6, 6],
            widths_3d: vec![4, 4, 6, 6],
            ..ModelConfig::default()
        }
    }

    fn small_scene(seed: u64) -> PointCloud {
        let cfg = SynthConfig {
            grid: small_config().grid,
            class_count: 4,
            objects: 3,
            beams: 8,
            azimuths: 24,
            sensor: [0.0, 0.0, 0.5],
            ..SynthConfig::default()
        };
        generate_synthetic_scene(seed, &cfg).unwrap().cloud
    }

    #[test]
    fn output_shapes() {
        let model = SsaScModel::<f64>::new(small_config()).unwrap();
        let cloud = small_scene(1);
        let g = Graph::new();
        let out = model.forward(&g, &cloud, Mode::Train, true).unwrap();
        assert_eq!(out.completion.shape(), &[16 * 16 * 4, 5]);
        let seg = out.segmentation.unwrap();
        let mut occupied = out.assignment.voxels.clone();
        occupied.sort();
        occupied.dedup();
        assert_eq!(seg.coords(), &occupied[..]);
        assert_eq!(seg.channels(), 4);
    }

    #[test]
    fn z_stack_channels() {
        let g = Graph::<f64>::inference();
        let f = DenseTensor::from_values(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = SparseVoxelTensor::from_points(vec![[0, 1, 0], [0, 1, 2]], f, [2, 2, 3]).unwrap();
        let d = z_stack(&g, &s).unwrap();
        assert_eq!(d.shape(), &[6, 2, 2]);
        // channel ch*H + z at (0, 1)
        assert_eq!(d.at(&[0, 0, 1]), 1.0);
        assert_eq!(d.at(&[3, 0, 1]), 2.0);
        assert_eq!(d.at(&[2, 0, 1]), 3.0);
        assert_eq!(d.at(&[5, 0, 1]), 4.0);
        assert_eq!(d.sum(), 10.0);
    }

    #[test]
    fn empty_cloud_predicts_a_grid() {
        let model = SsaScModel::<f64>::new(small_config()).unwrap();
        let pred = model.forward_infer(&PointCloud::default()).unwrap();
        assert_eq!(pred.extents(), [16, 16, 4]);
        let g = Graph::new();
        let out = model.forward(&g, &PointCloud::default(), Mode::Train, true).unwrap();
        assert!(out.completion.all_finite());
        assert!(out.segmentation.unwrap().is_empty());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = small_config();
        c.widths_2d.pop();
        assert!(SsaScModel::<f64>::new(c).is_err());
        let mut c = small_config();
        c.fusion_levels = vec![4];
        assert!(SsaScModel::<f64>::new(c).is_err());
    }
}
