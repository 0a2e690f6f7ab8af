use std::sync::Arc;

use crate::nn::{BatchNorm, Ctx, Layout};
use crate::scalar::{row_major, transposed, Scalar};
use crate::tensor::{Coord, CoordSet, DenseTensor, Graph, ParamId, ParamStore, SparseVoxelTensor, TensorError};

/// How output coordinates relate to input coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SparseConvMode {
    /// Output set equals the input set; odd kernels centred on each voxel.
    Submanifold,
    /// Kernel 2, stride 2: outputs at the unique floor-halved input coordinates.
    Strided,
    /// Inverse of [`Strided`](Self::Strided) onto a recorded finer coordinate set:
    /// fine voxel `f` reads its parent `f / 2` through tap `f - 2 * (f / 2)`.
    Transposed,
}

/// Per-tap `(input row, output row)` pairs. Taps are visited in ascending
/// order and every output receives at most one pair per tap, so each output
/// row accumulates in a fixed order.
#[derive(Debug)]
pub struct Rulebook {
    pub kernel: [usize; 3],
    pub mode: SparseConvMode,
    pub output: Arc<CoordSet>,
    pub inputs: usize,
    pub pairs: Vec<Vec<(u32, u32)>>,
}

fn tap_index(kernel: [usize; 3], t: [usize; 3]) -> usize {
    (t[0] * kernel[1] + t[1]) * kernel[2] + t[2]
}

fn halved(lattice: [usize; 3]) -> [usize; 3] {
    lattice.map(|e| e.div_ceil(2))
}

impl Rulebook {
    pub fn build(
        input: &Arc<CoordSet>,
        target: Option<&Arc<CoordSet>>,
        kernel: [usize; 3],
        mode: SparseConvMode,
    ) -> Result<Self, TensorError> {
        let taps = kernel.iter().product::<usize>();
        let mut pairs = vec![Vec::new(); taps];
        let output = match mode {
            SparseConvMode::Submanifold => {
                if kernel.iter().any(|k| k % 2 == 0) {
                    return Err(TensorError::Incompatible {
                        op: "submanifold conv",
                        detail: format!("kernel {kernel:?} must be odd"),
                    });
                }
                let half = kernel.map(|k| (k / 2) as i32);
                for (o, c) in input.coords().iter().enumerate() {
                    for i in 0..kernel[0] {
                        for j in 0..kernel[1] {
                            for k in 0..kernel[2] {
                                let n = [c[0] + i as i32 - half[0], c[1] + j as i32 - half[1], c[2] + k as i32 - half[2]];
                                if let Some(r) = input.lookup(n) {
                                    pairs[tap_index(kernel, [i, j, k])].push((r as u32, o as u32));
                                }
                            }
                        }
                    }
                }
                Arc::clone(input)
            }
            SparseConvMode::Strided => {
                if kernel != [2, 2, 2] {
                    return Err(TensorError::Incompatible {
                        op: "strided conv",
                        detail: format!("kernel {kernel:?}, expected [2, 2, 2]"),
                    });
                }
                let mut coarse: Vec<Coord> = input.coords().iter().map(|c| c.map(|v| v.div_euclid(2))).collect();
                coarse.sort_unstable();
                coarse.dedup();
                let out = Arc::new(CoordSet::new(coarse, halved(input.lattice()))?);
                for (r, c) in input.coords().iter().enumerate() {
                    let p = c.map(|v| v.div_euclid(2));
                    let o = out.lookup(p).expect("parent present");
                    let d = [0, 1, 2].map(|a| (c[a] - 2 * p[a]) as usize);
                    pairs[tap_index(kernel, d)].push((r as u32, o as u32));
                }
                for tap in &mut pairs {
                    tap.sort_unstable_by_key(|&(_, o)| o);
                }
                out
            }
            SparseConvMode::Transposed => {
                let fine = target.ok_or_else(|| TensorError::Incompatible {
                    op: "transposed conv",
                    detail: "no target coordinate set".into(),
                })?;
                if kernel != [2, 2, 2] || halved(fine.lattice()) != input.lattice() {
                    return Err(TensorError::Incompatible {
                        op: "transposed conv",
                        detail: format!(
                            "level mismatch: coarse lattice {:?}, fine lattice {:?}",
                            input.lattice(),
                            fine.lattice()
                        ),
                    });
                }
                for (o, f) in fine.coords().iter().enumerate() {
                    let p = f.map(|v| v.div_euclid(2));
                    if let Some(r) = input.lookup(p) {
                        let d = [0, 1, 2].map(|a| (f[a] - 2 * p[a]) as usize);
                        pairs[tap_index(kernel, d)].push((r as u32, o as u32));
                    }
                }
                Arc::clone(fine)
            }
        };
        Ok(Self {
            kernel,
            mode,
            output,
            inputs: input.len(),
            pairs,
        })
    }

    pub fn taps(&self) -> usize {
        self.pairs.len()
    }
}

/// Sparse 3D convolution over a prepared rulebook. `weight` is
/// `kx x ky x kz x in x out`; `bias` has `out` entries.
pub fn sparse_conv<T: Scalar>(
    g: &Graph<T>,
    x: &SparseVoxelTensor<T>,
    weight: &DenseTensor<T>,
    bias: Option<&DenseTensor<T>>,
    rules: &Arc<Rulebook>,
) -> Result<SparseVoxelTensor<T>, TensorError> {
    let shape = weight.shape();
    if shape.len() != 5 {
        return Err(TensorError::Rank {
            expected: 5,
            shape: shape.to_vec(),
        });
    }
    let (cin, cout) = (shape[3], shape[4]);
    if shape[..3] != rules.kernel {
        return Err(TensorError::Incompatible {
            op: "sparse conv",
            detail: format!("weight kernel {:?} vs rulebook {:?}", &shape[..3], rules.kernel),
        });
    }
    if x.channels() != cin {
        return Err(TensorError::ChannelMismatch {
            op: "sparse conv",
            expected: cin,
            got: x.channels(),
        });
    }
    if x.len() != rules.inputs {
        return Err(TensorError::Incompatible {
            op: "sparse conv",
            detail: format!("{} input rows, rulebook built for {}", x.len(), rules.inputs),
        });
    }
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(TensorError::ChannelMismatch {
                op: "sparse conv bias",
                expected: cout,
                got: b.len(),
            });
        }
    }
    let n_out = rules.output.len();
    let mut out = vec![T::zero(); n_out * cout];
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(cout.max(1)) {
            row.copy_from_slice(b.values());
        }
    }
    let xv = x.features().values();
    let wv = weight.values();
    let tap_len = cin * cout;
    let mut gathered = Vec::new();
    let mut partial = Vec::new();
    for (t, pairs) in rules.pairs.iter().enumerate() {
        if pairs.is_empty() {
            continue;
        }
        let m = pairs.len();
        gathered.clear();
        for &(r, _) in pairs {
            gathered.extend_from_slice(&xv[r as usize * cin..(r as usize + 1) * cin]);
        }
        partial.clear();
        partial.resize(m * cout, T::zero());
        T::gemm(m, cin, cout, T::one(), &gathered, row_major(cin), &wv[t * tap_len..(t + 1) * tap_len], row_major(cout), T::zero(), &mut partial, row_major(cout));
        for (i, &(_, o)) in pairs.iter().enumerate() {
            let dst = &mut out[o as usize * cout..(o as usize + 1) * cout];
            for (d, s) in dst.iter_mut().zip(&partial[i * cout..(i + 1) * cout]) {
                *d += *s;
            }
        }
    }

    let rb = Arc::clone(rules);
    let xs = Arc::clone(x.features().shared());
    let ws = Arc::clone(weight.shared());
    let n_in = x.len();
    let mut inputs = vec![x.features(), weight];
    inputs.extend(bias);
    let features = g.record(vec![n_out, cout], out, &inputs, move |go, needs| {
        let mut gx = needs[0].then(|| vec![T::zero(); n_in * cin]);
        let mut gw = needs[1].then(|| vec![T::zero(); ws.len()]);
        let mut gin = Vec::new();
        let mut gout = Vec::new();
        let mut part = Vec::new();
        for (t, pairs) in rb.pairs.iter().enumerate() {
            if pairs.is_empty() {
                continue;
            }
            let m = pairs.len();
            gout.clear();
            for &(_, o) in pairs {
                gout.extend_from_slice(&go[o as usize * cout..(o as usize + 1) * cout]);
            }
            if let Some(gx) = gx.as_mut() {
                part.clear();
                part.resize(m * cin, T::zero());
                let wt = &ws[t * tap_len..(t + 1) * tap_len];
                T::gemm(m, cout, cin, T::one(), &gout, row_major(cout), wt, transposed(cout), T::zero(), &mut part, row_major(cin));
                for (i, &(r, _)) in pairs.iter().enumerate() {
                    let dst = &mut gx[r as usize * cin..(r as usize + 1) * cin];
                    for (d, s) in dst.iter_mut().zip(&part[i * cin..(i + 1) * cin]) {
                        *d += *s;
                    }
                }
            }
            if let Some(gw) = gw.as_mut() {
                gin.clear();
                for &(r, _) in pairs {
                    gin.extend_from_slice(&xs[r as usize * cin..(r as usize + 1) * cin]);
                }
                let dst = &mut gw[t * tap_len..(t + 1) * tap_len];
                T::gemm(cin, m, cout, T::one(), &gin, transposed(cin), &gout, row_major(cout), T::one(), dst, row_major(cout));
            }
        }
        let mut grads = vec![gx, gw];
        if needs.len() > 2 {
            grads.push(needs[2].then(|| {
                let mut gb = vec![T::zero(); cout];
                for row in go.chunks_exact(cout.max(1)) {
                    for (b, v) in gb.iter_mut().zip(row) {
                        *b += *v;
                    }
                }
                gb
            }));
        }
        grads
    });
    SparseVoxelTensor::new(Arc::clone(&rules.output), features)
}

/// Sparse convolution with optional batch-norm and ReLU.
#[derive(Clone, Debug)]
pub struct SparseConv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub mode: SparseConvMode,
    pub norm: Option<BatchNorm>,
    pub relu: bool,
}

impl SparseConv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        mode: SparseConvMode,
        norm: bool,
        relu: bool,
    ) -> Self {
        let taps: usize = kernel.iter().product();
        let bound = 1.0 / ((taps * in_channels) as f64).sqrt();
        Self {
            weight: store.uniform(
                format!("{name}.weight"),
                &[kernel[0], kernel[1], kernel[2], in_channels, out_channels],
                bound,
            ),
            bias: store.uniform(format!("{name}.bias"), &[out_channels], bound),
            in_channels,
            out_channels,
            kernel,
            mode,
            norm: norm.then(|| BatchNorm::new(store, &format!("{name}.bn"), out_channels)),
            relu,
        }
    }

    /// `target` is the finer coordinate set for [`SparseConvMode::Transposed`].
    pub fn forward<T: Scalar>(
        &self,
        ctx: &Ctx<'_, T>,
        x: &SparseVoxelTensor<T>,
        target: Option<&Arc<CoordSet>>,
    ) -> Result<SparseVoxelTensor<T>, TensorError> {
        if x.channels() != self.in_channels {
            return Err(TensorError::ChannelMismatch {
                op: "sparse conv",
                expected: self.in_channels,
                got: x.channels(),
            });
        }
        let rules = ctx.rulebook(x.coord_set(), target, self.kernel, self.mode)?;
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        let y = sparse_conv(ctx.graph, x, &w, Some(&b), &rules)?;
        let mut f = y.features().clone();
        if let Some(bn) = &self.norm {
            f = bn.forward(ctx, &f, Layout::Rows)?;
        }
        if self.relu {
            f = ctx.graph.relu(&f);
        }
        y.with_features(f)
    }

    /// Kernel weights only.
    pub fn kernel_weight_count(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.in_channels * self.out_channels
    }
}
