use crate::nn::{Ctx, SparseConv3d, SparseConvMode};
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, SparseVoxelTensor, TensorError};

/// Identity skip plus two mirrored asymmetric paths,
/// `3x1x3 -> 1x3x3` and `1x3x3 -> 3x1x3`, each conv followed by BN and ReLU.
#[derive(Clone, Debug)]
pub struct AsymResidualBlock {
    pub channels: usize,
    pub paths: [[SparseConv3d; 2]; 2],
}

impl AsymResidualBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let mut conv = |suffix: &str, kernel| {
            SparseConv3d::new(store, &format!("{name}.{suffix}"), channels, channels, kernel, SparseConvMode::Submanifold, true, true)
        };
        let a0 = conv("a0", [3, 1, 3]);
        let a1 = conv("a1", [1, 3, 3]);
        let b0 = conv("b0", [1, 3, 3]);
        let b1 = conv("b1", [3, 1, 3]);
        Self {
            channels,
            paths: [[a0, a1], [b0, b1]],
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &SparseVoxelTensor<T>) -> Result<SparseVoxelTensor<T>, TensorError> {
        if x.channels() != self.channels {
            return Err(TensorError::ChannelMismatch {
                op: "asymmetric residual",
                expected: self.channels,
                got: x.channels(),
            });
        }
        let mut sum = x.features().clone();
        for [first, second] in &self.paths {
            let h = first.forward(ctx, x, None)?;
            let h = second.forward(ctx, &h, None)?;
            sum = ctx.graph.add(&sum, h.features())?;
        }
        x.with_features(sum)
    }

    pub fn convs(&self) -> impl Iterator<Item = &SparseConv3d> {
        self.paths.iter().flatten()
    }

    pub fn kernel_weight_count(&self) -> usize {
        self.convs().map(SparseConv3d::kernel_weight_count).sum()
    }
}

/// Residual block at the input width, then a stride-2 sparse conv.
#[derive(Clone, Debug)]
pub struct AsymDownBlock {
    pub residual: AsymResidualBlock,
    pub pool: SparseConv3d,
}

impl AsymDownBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, inputs: usize, outputs: usize) -> Self {
        Self {
            residual: AsymResidualBlock::new(store, &format!("{name}.res"), inputs),
            pool: SparseConv3d::new(store, &format!("{name}.pool"), inputs, outputs, [2, 2, 2], SparseConvMode::Strided, true, true),
        }
    }

    /// Returns `(downsampled, skip)` where `skip` is the pre-pooling output.
    pub fn forward<T: Scalar>(
        &self,
        ctx: &Ctx<'_, T>,
        x: &SparseVoxelTensor<T>,
    ) -> Result<(SparseVoxelTensor<T>, SparseVoxelTensor<T>), TensorError> {
        let skip = self.residual.forward(ctx, x)?;
        let down = self.pool.forward(ctx, &skip, None)?;
        Ok((down, skip))
    }
}

/// Scatters coarse features onto the skip's coordinates through the inverse
/// of the stride-2 gather, adds the skip, then applies a residual block.
#[derive(Clone, Debug)]
pub struct AsymUpBlock {
    pub up: SparseConv3d,
    pub residual: AsymResidualBlock,
}

impl AsymUpBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, inputs: usize, outputs: usize) -> Self {
        Self {
            up: SparseConv3d::new(store, &format!("{name}.up"), inputs, outputs, [2, 2, 2], SparseConvMode::Transposed, true, true),
            residual: AsymResidualBlock::new(store, &format!("{name}.res"), outputs),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        ctx: &Ctx<'_, T>,
        x: &SparseVoxelTensor<T>,
        skip: &SparseVoxelTensor<T>,
    ) -> Result<SparseVoxelTensor<T>, TensorError> {
        if skip.lattice().map(|e| e.div_ceil(2)) != x.lattice() {
            return Err(TensorError::Incompatible {
                op: "asymmetric upsample",
                detail: format!("level mismatch: input lattice {:?}, skip lattice {:?}", x.lattice(), skip.lattice()),
            });
        }
        if skip.channels() != self.up.out_channels {
            return Err(TensorError::ChannelMismatch {
                op: "asymmetric upsample skip",
                expected: self.up.out_channels,
                got: skip.channels(),
            });
        }
        let up = self.up.forward(ctx, x, Some(skip.coord_set()))?;
        let merged = ctx.graph.add(up.features(), skip.features())?;
        self.residual.forward(ctx, &skip.with_features(merged)?)
    }
}

/// Dimension-decomposition context block:
/// `out = x + sum_axis sigmoid(conv_axis(x)) * x` with 3x1x1, 1x3x1, 1x1x3 convs.
#[derive(Clone, Debug)]
pub struct DdcmBlock {
    pub channels: usize,
    pub axes: [SparseConv3d; 3],
}

impl DdcmBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let mut conv = |axis: usize| {
            let mut kernel = [1, 1, 1];
            kernel[axis] = 3;
            SparseConv3d::new(store, &format!("{name}.axis{axis}"), channels, channels, kernel, SparseConvMode::Submanifold, false, false)
        };
        let axes = [conv(0), conv(1), conv(2)];
        Self { channels, axes }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &SparseVoxelTensor<T>) -> Result<SparseVoxelTensor<T>, TensorError> {
        if x.channels() != self.channels {
            return Err(TensorError::ChannelMismatch {
                op: "ddcm",
                expected: self.channels,
                got: x.channels(),
            });
        }
        let g = ctx.graph;
        let mut out = x.features().clone();
        for conv in &self.axes {
            let gate = g.sigmoid(conv.forward(ctx, x, None)?.features());
            out = g.add(&out, &g.mul(&gate, x.features())?)?;
        }
        x.with_features(out)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.axes.iter().flat_map(|c| [c.weight, c.bias]).collect()
    }
}
