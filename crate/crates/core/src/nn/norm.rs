use std::sync::Arc;

use crate::nn::{Ctx, Mode};
use crate::scalar::Scalar;
use crate::tensor::{BufferId, DenseTensor, Graph, ParamId, ParamStore, StatUpdate, TensorError};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Where the channel axis sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// `n x c` matrix, statistics over rows (point and voxel features).
    Rows,
    /// `c x ...` channel-major map, statistics over the trailing extent.
    Channels,
}

impl Layout {
    fn split<T: Scalar>(self, x: &DenseTensor<T>) -> (usize, usize) {
        // (channels, samples per channel)
        let shape = x.shape();
        match self {
            Layout::Rows => (shape[1], shape[0]),
            Layout::Channels => (shape[0], x.len() / shape[0].max(1)),
        }
    }

    #[inline]
    fn at(self, c: usize, j: usize, channels: usize, samples: usize) -> usize {
        match self {
            Layout::Rows => j * channels + c,
            Layout::Channels => c * samples + j,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.constant(format!("{name}.gamma"), &[channels], 1.0),
            beta: store.constant(format!("{name}.beta"), &[channels], 0.0),
            running_mean: store.buffer(format!("{name}.running_mean"), channels, 0.0),
            running_var: store.buffer(format!("{name}.running_var"), channels, 1.0),
            channels,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: &DenseTensor<T>, layout: Layout) -> Result<DenseTensor<T>, TensorError> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        match ctx.mode {
            Mode::Train => {
                let (y, update) = batch_norm_train(ctx.graph, x, &gamma, &beta, layout)?;
                if let Some((mean, var)) = update {
                    ctx.graph.push_stat_update(StatUpdate {
                        running_mean: self.running_mean,
                        running_var: self.running_var,
                        batch_mean: mean,
                        batch_var: var,
                    });
                }
                Ok(y)
            }
            Mode::Eval => batch_norm_eval(
                ctx.graph,
                x,
                &gamma,
                &beta,
                ctx.store.buffer_value(self.running_mean),
                ctx.store.buffer_value(self.running_var),
                layout,
            ),
        }
    }
}

fn check_channels<T: Scalar>(x: &DenseTensor<T>, gamma: &DenseTensor<T>, layout: Layout) -> Result<(usize, usize), TensorError> {
    if x.shape().len() < 2 || (layout == Layout::Rows && x.shape().len() != 2) {
        return Err(TensorError::Rank {
            expected: 2,
            shape: x.shape().to_vec(),
        });
    }
    let (c, s) = layout.split(x);
    if gamma.len() != c {
        return Err(TensorError::ChannelMismatch {
            op: "batch_norm",
            expected: gamma.len(),
            got: c,
        });
    }
    Ok((c, s))
}

/// Normalizes with the statistics of `x` itself. Returns the output and the
/// observed (mean, unbiased variance) unless `x` has no samples.
#[allow(clippy::type_complexity)]
pub fn batch_norm_train<T: Scalar>(
    g: &Graph<T>,
    x: &DenseTensor<T>,
    gamma: &DenseTensor<T>,
    beta: &DenseTensor<T>,
    layout: Layout,
) -> Result<(DenseTensor<T>, Option<(Vec<T>, Vec<T>)>), TensorError> {
    let (c, s) = check_channels(x, gamma, layout)?;
    if s == 0 {
        return Ok((x.clone(), None));
    }
    let eps = T::lit(BN_EPS);
    let n = T::lit(s as f64);
    let xv = x.values();
    let gv = gamma.values();
    let bv = beta.values();

    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for ch in 0..c {
        let mut m = T::zero();
        for j in 0..s {
            m += xv[layout.at(ch, j, c, s)];
        }
        m /= n;
        let mut v = T::zero();
        for j in 0..s {
            let d = xv[layout.at(ch, j, c, s)] - m;
            v += d * d;
        }
        v /= n;
        let is = T::one() / (v + eps).sqrt();
        for j in 0..s {
            let i = layout.at(ch, j, c, s);
            let h = (xv[i] - m) * is;
            xhat[i] = h;
            out[i] = gv[ch] * h + bv[ch];
        }
        mean[ch] = m;
        var[ch] = v;
        inv_std[ch] = is;
    }
    let unbiased = if s > 1 {
        let k = n / T::lit((s - 1) as f64);
        var.iter().map(|v| *v * k).collect()
    } else {
        var.clone()
    };

    let xhat = Arc::new(xhat);
    let gamma_v = Arc::new(gv.to_vec());
    let y = g.record(x.shape().to_vec(), out, &[x, gamma, beta], move |go, needs| {
        let mut gx = needs[0].then(|| vec![T::zero(); go.len()]);
        let mut gg = vec![T::zero(); c];
        let mut gb = vec![T::zero(); c];
        for ch in 0..c {
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for j in 0..s {
                let i = layout.at(ch, j, c, s);
                sum_g += go[i];
                sum_gx += go[i] * xhat[i];
            }
            gb[ch] = sum_g;
            gg[ch] = sum_gx;
            if let Some(gx) = gx.as_mut() {
                let k = gamma_v[ch] * inv_std[ch] / n;
                for j in 0..s {
                    let i = layout.at(ch, j, c, s);
                    gx[i] = k * (n * go[i] - sum_g - xhat[i] * sum_gx);
                }
            }
        }
        vec![gx, needs[1].then_some(gg), needs[2].then_some(gb)]
    });
    Ok((y, Some((mean, unbiased))))
}

/// Normalizes with fixed running statistics.
pub fn batch_norm_eval<T: Scalar>(
    g: &Graph<T>,
    x: &DenseTensor<T>,
    gamma: &DenseTensor<T>,
    beta: &DenseTensor<T>,
    running_mean: &[T],
    running_var: &[T],
    layout: Layout,
) -> Result<DenseTensor<T>, TensorError> {
    let (c, s) = check_channels(x, gamma, layout)?;
    let eps = T::lit(BN_EPS);
    let xv = x.values();
    let inv_std: Vec<T> = running_var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
    let mean = running_mean.to_vec();
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for ch in 0..c {
        let (gm, bt) = (gamma.values()[ch], beta.values()[ch]);
        for j in 0..s {
            let i = layout.at(ch, j, c, s);
            let h = (xv[i] - mean[ch]) * inv_std[ch];
            xhat[i] = h;
            out[i] = gm * h + bt;
        }
    }
    let gamma_v = gamma.values().to_vec();
    Ok(g.record(x.shape().to_vec(), out, &[x, gamma, beta], move |go, needs| {
        let mut gx = needs[0].then(|| vec![T::zero(); go.len()]);
        let mut gg = vec![T::zero(); c];
        let mut gb = vec![T::zero(); c];
        for ch in 0..c {
            for j in 0..s {
                let i = layout.at(ch, j, c, s);
                gb[ch] += go[i];
                gg[ch] += go[i] * xhat[i];
                if let Some(gx) = gx.as_mut() {
                    gx[i] = go[i] * gamma_v[ch] * inv_std[ch];
                }
            }
        }
        vec![gx, needs[1].then_some(gg), needs[2].then_some(gb)]
    }))
}

/// Folds batch statistics into running buffers:
/// `running = (1 - momentum) * running + momentum * batch`.
pub fn apply_stat_updates<T: Scalar>(store: &mut ParamStore<T>, updates: &[StatUpdate<T>]) {
    let m = T::lit(BN_MOMENTUM);
    let keep = T::one() - m;
    for u in updates {
        for (r, b) in store.buffer_mut(u.running_mean).iter_mut().zip(&u.batch_mean) {
            *r = keep * *r + m * *b;
        }
        for (r, b) in store.buffer_mut(u.running_var).iter_mut().zip(&u.batch_var) {
            *r = keep * *r + m * *b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_output_is_standardized() {
        let g = Graph::<f64>::inference();
        let x = DenseTensor::from_values(&[4, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]).unwrap();
        let gamma = DenseTensor::from_values(&[2], vec![1.0, 1.0]).unwrap();
        let beta = DenseTensor::from_values(&[2], vec![0.0, 0.0]).unwrap();
        let (y, stats) = batch_norm_train(&g, &x, &gamma, &beta, Layout::Rows).unwrap();
        let (mean, var) = stats.unwrap();
        assert_eq!(mean, vec![2.5, 25.0]);
        assert!((var[0] - 5.0 / 3.0).abs() < 1e-12);
        for ch in 0..2 {
            let m: f64 = (0..4).map(|j| y.values()[j * 2 + ch]).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12);
        }
    }

    #[test]
    fn channel_layout_matches_rows_layout_on_transpose() {
        let g = Graph::<f64>::inference();
        let rows = DenseTensor::from_values(&[3, 2], vec![1.0, -1.0, 0.5, 2.0, -3.0, 0.25]).unwrap();
        let chans = g.permute(&rows, &[1, 0]).unwrap();
        let gamma = DenseTensor::from_values(&[2], vec![1.5, 0.5]).unwrap();
        let beta = DenseTensor::from_values(&[2], vec![0.1, -0.2]).unwrap();
        let (a, _) = batch_norm_train(&g, &rows, &gamma, &beta, Layout::Rows).unwrap();
        let (b, _) = batch_norm_train(&g, &chans, &gamma, &beta, Layout::Channels).unwrap();
        let bt = g.permute(&b, &[1, 0]).unwrap();
        assert_eq!(a.values(), bt.values());
    }

    #[test]
    fn running_stats_update() {
        let mut store = ParamStore::<f64>::new(0);
        let bn = BatchNorm::new(&mut store, "bn", 1);
        apply_stat_updates(
            &mut store,
            &[StatUpdate {
                running_mean: bn.running_mean,
                running_var: bn.running_var,
                batch_mean: vec![2.0],
                batch_var: vec![3.0],
            }],
        );
        assert!((store.buffer_value(bn.running_mean)[0] - 0.2).abs() < 1e-15);
        assert!((store.buffer_value(bn.running_var)[0] - 1.2).abs() < 1e-15);
    }
}
