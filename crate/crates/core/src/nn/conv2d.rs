use std::sync::Arc;

use crate::nn::{BatchNorm, Ctx, Layout};
use crate::scalar::{row_major, transposed, Scalar};
use crate::tensor::{DenseTensor, Graph, ParamId, ParamStore, TensorError};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Whether the column matrix is the input itself.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(x: &[T], geo: &Geometry) -> Vec<T> {
    let n = geo.pixels();
    let mut cols = vec![T::zero(); geo.patch() * n];
    for c in 0..geo.channels {
        for i in 0..geo.kh {
            for j in 0..geo.kw {
                let row = (c * geo.kh + i) * geo.kw + j;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..geo.out_h {
                    let iy = (oy * geo.stride + i) as isize - geo.pad as isize;
                    if iy < 0 || iy >= geo.height as isize {
                        continue;
                    }
                    let src = &x[(c * geo.height + iy as usize) * geo.width..][..geo.width];
                    for ox in 0..geo.out_w {
                        let ix = (ox * geo.stride + j) as isize - geo.pad as isize;
                        if ix >= 0 && ix < geo.width as isize {
                            dst[oy * geo.out_w + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], geo: &Geometry) -> Vec<T> {
    let n = geo.pixels();
    let mut x = vec![T::zero(); geo.channels * geo.height * geo.width];
    for c in 0..geo.channels {
        for i in 0..geo.kh {
            for j in 0..geo.kw {
                let row = (c * geo.kh + i) * geo.kw + j;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..geo.out_h {
                    let iy = (oy * geo.stride + i) as isize - geo.pad as isize;
                    if iy < 0 || iy >= geo.height as isize {
                        continue;
                    }
                    let base = (c * geo.height + iy as usize) * geo.width;
                    for ox in 0..geo.out_w {
                        let ix = (ox * geo.stride + j) as isize - geo.pad as isize;
                        if ix >= 0 && ix < geo.width as isize {
                            x[base + ix as usize] += src[oy * geo.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Zero-padded 2D cross-correlation of a `C x H x W` map with an
/// `O x C x kh x kw` kernel.
pub fn conv2d<T: Scalar>(
    g: &Graph<T>,
    x: &DenseTensor<T>,
    weight: &DenseTensor<T>,
    bias: Option<&DenseTensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<DenseTensor<T>, TensorError> {
    let (channels, height, width) = x.dims3()?;
    let [out_ch, in_ch, kh, kw] = match weight.shape() {
        &[o, c, a, b] => [o, c, a, b],
        s => {
            return Err(TensorError::Rank {
                expected: 4,
                shape: s.to_vec(),
            })
        }
    };
    if in_ch != channels {
        return Err(TensorError::ChannelMismatch {
            op: "conv2d",
            expected: in_ch,
            got: channels,
        });
    }
    if let Some(b) = bias {
        if b.len() != out_ch {
            return Err(TensorError::ChannelMismatch {
                op: "conv2d bias",
                expected: out_ch,
                got: b.len(),
            });
        }
    }
    if stride == 0 || height + 2 * pad < kh || width + 2 * pad < kw {
        return Err(TensorError::Incompatible {
            op: "conv2d",
            detail: format!("kernel {kh}x{kw} stride {stride} pad {pad} on {height}x{width}"),
        });
    }
    let geo = Geometry {
        channels,
        height,
        width,
        kh,
        kw,
        stride,
        pad,
        out_h: (height + 2 * pad - kh) / stride + 1,
        out_w: (width + 2 * pad - kw) / stride + 1,
    };
    let (k, n) = (geo.patch(), geo.pixels());
    let cols: Arc<Vec<T>> = if geo.is_pointwise() {
        Arc::clone(x.shared())
    } else {
        Arc::new(im2col(x.values(), &geo))
    };
    let mut out = vec![T::zero(); out_ch * n];
    if let Some(b) = bias {
        for (row, bv) in out.chunks_exact_mut(n).zip(b.values()) {
            row.fill(*bv);
        }
    }
    T::gemm(out_ch, k, n, T::one(), weight.values(), row_major(k), &cols, row_major(n), T::one(), &mut out, row_major(n));

    let w = Arc::clone(weight.shared());
    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    Ok(g.record(vec![out_ch, geo.out_h, geo.out_w], out, &inputs, move |go, needs| {
        let gx = needs[0].then(|| {
            let mut gcols = vec![T::zero(); k * n];
            T::gemm(k, out_ch, n, T::one(), &w, transposed(k), go, row_major(n), T::zero(), &mut gcols, row_major(n));
            if geo.is_pointwise() {
                gcols
            } else {
                col2im(&gcols, &geo)
            }
        });
        let gw = needs[1].then(|| {
            let mut gw = vec![T::zero(); out_ch * k];
            T::gemm(out_ch, n, k, T::one(), go, row_major(n), &cols, transposed(n), T::zero(), &mut gw, row_major(k));
            gw
        });
        let mut grads = vec![gx, gw];
        if needs.len() > 2 {
            grads.push(needs[2].then(|| go.chunks_exact(n.max(1)).map(|r| r.iter().copied().sum()).collect()));
        }
        grads
    }))
}

/// Nearest-neighbour 2x upsampling of a `C x H x W` map.
pub fn upsample2x<T: Scalar>(g: &Graph<T>, x: &DenseTensor<T>) -> Result<DenseTensor<T>, TensorError> {
    let (c, h, w) = x.dims3()?;
    let (oh, ow) = (2 * h, 2 * w);
    let xv = x.values();
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out[(ch * oh + y) * ow + xx] = xv[(ch * h + y / 2) * w + xx / 2];
            }
        }
    }
    Ok(g.record(vec![c, oh, ow], out, &[x], move |go, _| {
        let mut gx = vec![T::zero(); c * h * w];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    gx[(ch * h + y / 2) * w + xx / 2] += go[(ch * oh + y) * ow + xx];
                }
            }
        }
        vec![Some(gx)]
    }))
}

/// Conv2d with optional batch-norm and ReLU.
#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub norm: Option<BatchNorm>,
    pub relu: bool,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        norm: bool,
        relu: bool,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        Self {
            weight: store.uniform(format!("{name}.weight"), &[out_channels, in_channels, kernel, kernel], bound),
            bias: store.uniform(format!("{name}.bias"), &[out_channels], bound),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
            norm: norm.then(|| BatchNorm::new(store, &format!("{name}.bn"), out_channels)),
            relu,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &DenseTensor<T>) -> Result<DenseTensor<T>, TensorError> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        let mut y = conv2d(ctx.graph, x, &w, Some(&b), self.stride, self.pad)?;
        if let Some(bn) = &self.norm {
            y = bn.forward(ctx, &y, Layout::Channels)?;
        }
        if self.relu {
            y = ctx.graph.relu(&y);
        }
        Ok(y)
    }

    /// Trainable weights of the convolution itself (kernel + bias).
    pub fn weight_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: Vec<f64>) -> DenseTensor<f64> {
        DenseTensor::from_values(shape, v).unwrap()
    }

    /// Direct six-loop cross-correlation.
    fn naive(x: &DenseTensor<f64>, w: &DenseTensor<f64>, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
        let (c, h, wd) = x.dims3().unwrap();
        let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; o * oh * ow];
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[oc];
                    for ic in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * stride + i) as isize - pad as isize;
                                let ix = (ox * stride + j) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w.at(&[oc, ic, i, j]) * x.at(&[ic, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_pointwise_kernel() {
        let g = Graph::<f64>::inference();
        let x = t(&[2, 3, 3], (0..18).map(f64::from).collect());
        let w = t(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]);
        let y = conv2d(&g, &x, &w, None, 1, 0).unwrap();
        assert_eq!(y.values(), x.values());
    }

    #[test]
    fn averaging_kernel_on_constant() {
        let g = Graph::<f64>::inference();
        let x = t(&[1, 5, 5], vec![3.5; 25]);
        let w = t(&[1, 1, 3, 3], vec![1.0 / 9.0; 9]);
        let y = conv2d(&g, &x, &w, None, 1, 1).unwrap();
        for i in 1..4 {
            for j in 1..4 {
                assert!((y.at(&[0, i, j]) - 3.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Graph::<f64>::inference();
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 3), (2, 0, 2), (1, 0, 1)] {
            let x = t(&[3, 5, 5], (0..75).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let w = t(&[4, 3, k, k], (0..4 * 3 * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y = conv2d(&g, &x, &w, Some(&t(&[4], b.clone())), stride, pad).unwrap();
            let want = naive(&x, &w, &b, stride, pad);
            assert_eq!(y.len(), want.len());
            for (a, e) in y.values().iter().zip(&want) {
                assert!((a - e).abs() < 1e-12, "stride {stride} pad {pad}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn output_extent_formula() {
        let g = Graph::<f64>::inference();
        let x = DenseTensor::<f64>::zeros(&[1, 7, 6]);
        let w = DenseTensor::<f64>::zeros(&[2, 1, 3, 3]);
        let y = conv2d(&g, &x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, (7 + 2 - 3) / 2 + 1, (6 + 2 - 3) / 2 + 1]);
    }

    #[test]
    fn channel_mismatch_errors() {
        let g = Graph::<f64>::inference();
        let x = DenseTensor::<f64>::zeros(&[2, 4, 4]);
        let w = DenseTensor::<f64>::zeros(&[1, 3, 3, 3]);
        assert!(matches!(
            conv2d(&g, &x, &w, None, 1, 1),
            Err(TensorError::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn upsample_repeats_cells() {
        let g = Graph::<f64>::inference();
        let x = t(&[1, 1, 2], vec![1.0, 2.0]);
        let y = upsample2x(&g, &x).unwrap();
        assert_eq!(y.values(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }
}
