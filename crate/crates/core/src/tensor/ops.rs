//! Differentiable primitives over [`DenseTensor`].

use std::sync::Arc;

use crate::scalar::{row_major, transposed, Scalar};
use crate::tensor::dense::DenseTensor;
use crate::tensor::graph::Graph;
use crate::tensor::TensorError;

fn same_shape<T: Scalar>(op: &'static str, a: &DenseTensor<T>, b: &DenseTensor<T>) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::Incompatible {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn add(&self, a: &DenseTensor<T>, b: &DenseTensor<T>) -> Result<DenseTensor<T>, TensorError> {
        same_shape("add", a, b)?;
        let data = a.values().iter().zip(b.values()).map(|(x, y)| *x + *y).collect();
        Ok(self.record(a.shape().to_vec(), data, &[a, b], |g, needs| {
            vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]
        }))
    }

    pub fn sub(&self, a: &DenseTensor<T>, b: &DenseTensor<T>) -> Result<DenseTensor<T>, TensorError> {
        same_shape("sub", a, b)?;
        let data = a.values().iter().zip(b.values()).map(|(x, y)| *x - *y).collect();
        Ok(self.record(a.shape().to_vec(), data, &[a, b], |g, needs| {
            vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| g.iter().map(|v| -*v).collect()),
            ]
        }))
    }

    /// Elementwise product.
    pub fn mul(&self, a: &DenseTensor<T>, b: &DenseTensor<T>) -> Result<DenseTensor<T>, TensorError> {
        same_shape("mul", a, b)?;
        let data = a.values().iter().zip(b.values()).map(|(x, y)| *x * *y).collect();
        let (av, bv) = (Arc::clone(a.shared()), Arc::clone(b.shared()));
        Ok(self.record(a.shape().to_vec(), data, &[a, b], move |g, needs| {
            vec![
                needs[0].then(|| g.iter().zip(bv.iter()).map(|(g, y)| *g * *y).collect()),
                needs[1].then(|| g.iter().zip(av.iter()).map(|(g, x)| *g * *x).collect()),
            ]
        }))
    }

    pub fn scale(&self, a: &DenseTensor<T>, s: T) -> DenseTensor<T> {
        let data = a.values().iter().map(|x| *x * s).collect();
        self.record(a.shape().to_vec(), data, &[a], move |g, _| {
            vec![Some(g.iter().map(|v| *v * s).collect())]
        })
    }

    pub fn sum(&self, a: &DenseTensor<T>) -> DenseTensor<T> {
        let n = a.len();
        self.record(vec![1], vec![a.sum()], &[a], move |g, _| vec![Some(vec![g[0]; n])])
    }

    /// `sum_i w_i a_i` for a fixed weight vector.
    pub fn dot_const(&self, a: &DenseTensor<T>, weights: Arc<Vec<T>>) -> Result<DenseTensor<T>, TensorError> {
        if weights.len() != a.len() {
            return Err(TensorError::Incompatible {
                op: "dot_const",
                detail: format!("{} weights for {} values", weights.len(), a.len()),
            });
        }
        let v = a.values().iter().zip(weights.iter()).map(|(x, w)| *x * *w).sum();
        Ok(self.record(vec![1], vec![v], &[a], move |g, _| {
            vec![Some(weights.iter().map(|w| *w * g[0]).collect())]
        }))
    }

    pub fn relu(&self, a: &DenseTensor<T>) -> DenseTensor<T> {
        let zero = T::zero();
        let data: Vec<T> = a.values().iter().map(|x| x.max(zero)).collect();
        if self.tracks_pattern() {
            self.note_pattern(a.values().iter().map(|x| u64::from(*x > zero)));
        }
        let av = Arc::clone(a.shared());
        self.record(a.shape().to_vec(), data, &[a], move |g, _| {
            vec![Some(
                g.iter()
                    .zip(av.iter())
                    .map(|(g, x)| if *x > zero { *g } else { zero })
                    .collect(),
            )]
        })
    }

    pub fn sigmoid(&self, a: &DenseTensor<T>) -> DenseTensor<T> {
        let one = T::one();
        let out: Arc<Vec<T>> = Arc::new(a.values().iter().map(|x| one / (one + (-*x).exp())).collect());
        let saved = Arc::clone(&out);
        self.record(a.shape().to_vec(), out.to_vec(), &[a], move |g, _| {
            vec![Some(
                g.iter()
                    .zip(saved.iter())
                    .map(|(g, s)| *g * *s * (one - *s))
                    .collect(),
            )]
        })
    }

    /// `(m x k) . (k x n)`.
    pub fn matmul(&self, a: &DenseTensor<T>, b: &DenseTensor<T>) -> Result<DenseTensor<T>, TensorError> {
        let (m, k) = a.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return Err(TensorError::Incompatible {
                op: "matmul",
                detail: format!("{:?} x {:?}", a.shape(), b.shape()),
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), a.values(), row_major(k), b.values(), row_major(n), T::zero(), &mut out, row_major(n));
        let (av, bv) = (Arc::clone(a.shared()), Arc::clone(b.shared()));
        Ok(self.record(vec![m, n], out, &[a, b], move |g, needs| {
            let ga = needs[0].then(|| {
                let mut ga = vec![T::zero(); m * k];
                T::gemm(m, n, k, T::one(), g, row_major(n), &bv, transposed(n), T::zero(), &mut ga, row_major(k));
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![T::zero(); k * n];
                T::gemm(k, m, n, T::one(), &av, transposed(k), g, row_major(n), T::zero(), &mut gb, row_major(n));
                gb
            });
            vec![ga, gb]
        }))
    }

    /// Fully connected layer on rows: `x (n x in) . w (in x out) + b`.
    pub fn linear(
        &self,
        x: &DenseTensor<T>,
        w: &DenseTensor<T>,
        b: Option<&DenseTensor<T>>,
    ) -> Result<DenseTensor<T>, TensorError> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row_bias(&y, b),
            None => Ok(y),
        }
    }

    /// Adds a length-`c` bias to every row of an `n x c` matrix.
    pub fn add_row_bias(&self, x: &DenseTensor<T>, b: &DenseTensor<T>) -> Result<DenseTensor<T>, TensorError> {
        let (n, c) = x.dims2()?;
        if b.len() != c {
            return Err(TensorError::ChannelMismatch {
                op: "add_row_bias",
                expected: c,
                got: b.len(),
            });
        }
        let bv = b.values();
        let mut data = x.values().to_vec();
        for row in data.chunks_exact_mut(c.max(1)) {
            for (v, bb) in row.iter_mut().zip(bv) {
                *v += *bb;
            }
        }
        Ok(self.record(vec![n, c], data, &[x, b], move |g, needs| {
            let gb = needs[1].then(|| {
                let mut gb = vec![T::zero(); c];
                for row in g.chunks_exact(c.max(1)) {
                    for (a, v) in gb.iter_mut().zip(row) {
                        *a += *v;
                    }
                }
                gb
            });
            vec![needs[0].then(|| g.to_vec()), gb]
        }))
    }

    /// Concatenation along axis 0; trailing extents must agree.
    pub fn concat0(&self, parts: &[&DenseTensor<T>]) -> Result<DenseTensor<T>, TensorError> {
        let first = parts.first().ok_or(TensorError::Incompatible {
            op: "concat0",
            detail: "no inputs".into(),
        })?;
        let tail = &first.shape()[1..];
        let mut lead = 0;
        for p in parts {
            if p.shape().len() != first.shape().len() || &p.shape()[1..] != tail {
                return Err(TensorError::Incompatible {
                    op: "concat0",
                    detail: format!("{:?} vs {:?}", first.shape(), p.shape()),
                });
            }
            lead += p.shape()[0];
        }
        let mut shape = first.shape().to_vec();
        shape[0] = lead;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        let mut bounds = Vec::with_capacity(parts.len());
        for p in parts {
            let start = data.len();
            data.extend_from_slice(p.values());
            bounds.push((start, data.len()));
        }
        Ok(self.record(shape, data, parts, move |g, needs| {
            bounds
                .iter()
                .zip(needs)
                .map(|(&(s, e), &need)| need.then(|| g[s..e].to_vec()))
                .collect()
        }))
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, x: &DenseTensor<T>, axes: &[usize]) -> Result<DenseTensor<T>, TensorError> {
        let rank = x.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::Incompatible {
                op: "permute",
                detail: format!("axes {axes:?} for rank {rank}"),
            });
        }
        let in_shape = x.shape().to_vec();
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let map = Arc::new(permutation_map(&out_shape, &strides));
        let xv = x.values();
        let data = map.iter().map(|&src| xv[src]).collect();
        Ok(self.record(out_shape, data, &[x], move |g, _| {
            let mut gx = vec![T::zero(); g.len()];
            for (gv, &src) in g.iter().zip(map.iter()) {
                gx[src] = *gv;
            }
            vec![Some(gx)]
        }))
    }

    /// Selects rows of an `n x c` matrix; repeated indices are allowed and
    /// their gradients accumulate.
    pub fn gather_rows(&self, x: &DenseTensor<T>, rows: Arc<Vec<usize>>) -> Result<DenseTensor<T>, TensorError> {
        let (n, c) = x.dims2()?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(TensorError::Incompatible {
                op: "gather_rows",
                detail: format!("row {bad} of {n}"),
            });
        }
        let xv = x.values();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows.iter() {
            data.extend_from_slice(&xv[r * c..(r + 1) * c]);
        }
        Ok(self.record(vec![rows.len(), c], data, &[x], move |g, _| {
            let mut gx = vec![T::zero(); n * c];
            for (i, &r) in rows.iter().enumerate() {
                for (a, v) in gx[r * c..(r + 1) * c].iter_mut().zip(&g[i * c..(i + 1) * c]) {
                    *a += *v;
                }
            }
            vec![Some(gx)]
        }))
    }

    /// `out[targets[i]] += x[i]` into a zero tensor of `out_shape`.
    pub fn scatter_add(
        &self,
        x: &DenseTensor<T>,
        targets: Arc<Vec<usize>>,
        out_shape: &[usize],
    ) -> Result<DenseTensor<T>, TensorError> {
        let total: usize = out_shape.iter().product();
        if targets.len() != x.len() || targets.iter().any(|&t| t >= total) {
            return Err(TensorError::Incompatible {
                op: "scatter_add",
                detail: format!("{} targets for {} values into {total}", targets.len(), x.len()),
            });
        }
        let mut data = vec![T::zero(); total];
        for (v, &t) in x.values().iter().zip(targets.iter()) {
            data[t] += *v;
        }
        Ok(self.record(out_shape.to_vec(), data, &[x], move |g, _| {
            vec![Some(targets.iter().map(|&t| g[t]).collect())]
        }))
    }

    /// Per-group, per-channel maximum over rows of an `n x c` matrix.
    ///
    /// Each group lists member row indices. The gradient flows to the first
    /// member attaining the maximum in each channel. Empty groups are not
    /// allowed.
    pub fn segment_max(&self, x: &DenseTensor<T>, groups: &[Vec<usize>]) -> Result<DenseTensor<T>, TensorError> {
        let (n, c) = x.dims2()?;
        let xv = x.values();
        let mut data = Vec::with_capacity(groups.len() * c);
        let mut winners = Vec::with_capacity(groups.len() * c);
        for group in groups {
            let Some((&head, rest)) = group.split_first() else {
                return Err(TensorError::Incompatible {
                    op: "segment_max",
                    detail: "empty group".into(),
                });
            };
            if group.iter().any(|&r| r >= n) {
                return Err(TensorError::Incompatible {
                    op: "segment_max",
                    detail: format!("member row out of {n}"),
                });
            }
            for ch in 0..c {
                let mut best = head;
                let mut best_v = xv[head * c + ch];
                for &r in rest {
                    let v = xv[r * c + ch];
                    if v > best_v {
                        best = r;
                        best_v = v;
                    }
                }
                data.push(best_v);
                winners.push(best);
            }
        }
        if self.tracks_pattern() {
            self.note_pattern(winners.iter().map(|&w| w as u64));
        }
        Ok(self.record(vec![groups.len(), c], data, &[x], move |g, _| {
            let mut gx = vec![T::zero(); n * c];
            for (i, &w) in winners.iter().enumerate() {
                gx[w * c + i % c] += g[i];
            }
            vec![Some(gx)]
        }))
    }
}

/// Source offset for every output element of a permuted view.
fn permutation_map(out_shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let total: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        map.push(idx.iter().zip(strides).map(|(i, s)| i * s).sum());
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::params::ParamStore;

    fn t(shape: &[usize], v: Vec<f64>) -> DenseTensor<f64> {
        DenseTensor::from_values(shape, v).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut store = ParamStore::<f64>::new(0);
        let p = store.uniform("p", &[3], 1.0);
        let g = Graph::new();
        let x = g.param(&store, p);
        let loss = g.sum(&x);
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.param(p).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_is_twice_value() {
        let mut store = ParamStore::<f64>::new(0);
        let p = store.constant("p", &[2], 0.0);
        store.value_mut(p).copy_from_slice(&[1.0, 2.0]);
        let g = Graph::new();
        let x = g.param(&store, p);
        let sq = g.mul(&x, &x).unwrap();
        let loss = g.sum(&sq);
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.param(p).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn permute_matches_index_formula() {
        let g = Graph::<f64>::inference();
        let x = t(&[2, 3, 4], (0..24).map(f64::from).collect());
        let y = g.permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(y.at(&[c, a, b]), x.at(&[a, b, c]));
                }
            }
        }
        assert!(g.permute(&x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn segment_max_takes_first_winner() {
        let g = Graph::new();
        let x = g.leaf(&t(&[3, 2], vec![1.0, 5.0, 1.0, 2.0, 0.0, 5.0]));
        let y = g.segment_max(&x, &[vec![0, 1, 2]]).unwrap();
        assert_eq!(y.values(), &[1.0, 5.0]);
        let loss = g.sum(&y);
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap(), &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_and_gather_shapes() {
        let g = Graph::<f64>::inference();
        let a = t(&[1, 2], vec![1.0, 2.0]);
        let b = t(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let c = g.concat0(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        let r = g.gather_rows(&c, Arc::new(vec![2, 0, 2])).unwrap();
        assert_eq!(r.values(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        assert!(g.concat0(&[&a, &t(&[1, 3], vec![0.0; 3])]).is_err());
    }

    #[test]
    fn mismatched_add_errors() {
        let g = Graph::<f64>::new();
        assert!(g.add(&t(&[2], vec![0.0; 2]), &t(&[3], vec![0.0; 3])).is_err());
    }
}
