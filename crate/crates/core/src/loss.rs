//! Cross-entropy and Lovasz-softmax losses, the two-branch weighted total,
//! and modal-label voxel supervision.

use std::collections::BTreeMap;
use std::sync::Arc;

use num_traits::Num;
use serde::{Deserialize, Serialize};

use crate::kitti::{EMPTY, INVALID};
use crate::scalar::Scalar;
use crate::tensor::{Coord, DenseTensor, Graph, TensorError};

/// Target value skipped by both losses.
pub const IGNORE: u8 = INVALID;

fn check_targets<T: Scalar>(op: &'static str, x: &DenseTensor<T>, targets: &[u8], ignore: u8) -> Result<(usize, usize), TensorError> {
    let (n, k) = x.dims2()?;
    if targets.len() != n {
        return Err(TensorError::Incompatible {
            op,
            detail: format!("{} targets for {n} rows", targets.len()),
        });
    }
    if let Some(t) = targets.iter().find(|&&t| t != ignore && t as usize >= k) {
        return Err(TensorError::Incompatible {
            op,
            detail: format!("target {t} outside {k} classes"),
        });
    }
    Ok((n, k))
}

/// Row-wise softmax of an `n x k` matrix.
pub fn softmax<T: Scalar>(g: &Graph<T>, x: &DenseTensor<T>) -> Result<DenseTensor<T>, TensorError> {
    let (n, k) = x.dims2()?;
    let mut out = Vec::with_capacity(n * k);
    for row in x.values().chunks_exact(k.max(1)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut s = T::zero();
        for &v in row {
            let e = (v - m).exp();
            s += e;
            out.push(e);
        }
        for e in &mut out[start..] {
            *e /= s;
        }
    }
    let probs = Arc::new(out.clone());
    Ok(g.record(vec![n, k], out, &[x], move |go, _| {
        let mut gx = vec![T::zero(); n * k];
        for i in 0..n {
            let p = &probs[i * k..(i + 1) * k];
            let gr = &go[i * k..(i + 1) * k];
            let dot: T = p.iter().zip(gr).map(|(a, b)| *a * *b).sum();
            for j in 0..k {
                gx[i * k + j] = p[j] * (gr[j] - dot);
            }
        }
        vec![Some(gx)]
    }))
}

/// Mean `-log softmax(x)[target]` over rows whose target is not `ignore`.
/// Returns the loss and whether every row was ignored (loss then 0).
pub fn cross_entropy<T: Scalar>(
    g: &Graph<T>,
    logits: &DenseTensor<T>,
    targets: &[u8],
    ignore: u8,
) -> Result<(DenseTensor<T>, bool), TensorError> {
    let (n, k) = check_targets("cross_entropy", logits, targets, ignore)?;
    let count = targets.iter().filter(|&&t| t != ignore).count();
    if count == 0 {
        return Ok((g.scale(&g.sum(logits), T::zero()), true));
    }
    let inv = T::one() / T::lit(count as f64);
    let xv = logits.values();
    let mut probs = vec![T::zero(); n * k];
    let mut total = T::zero();
    for (i, &t) in targets.iter().enumerate() {
        if t == ignore {
            continue;
        }
        let row = &xv[i * k..(i + 1) * k];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let s: T = row.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + s.ln();
        total += lse - row[t as usize];
        for j in 0..k {
            probs[i * k + j] = (row[j] - lse).exp();
        }
    }
    let targets = targets.to_vec();
    let loss = g.record(vec![1], vec![total * inv], &[logits], move |go, _| {
        let mut gx = vec![T::zero(); n * k];
        for (i, &t) in targets.iter().enumerate() {
            if t == ignore {
                continue;
            }
            for j in 0..k {
                gx[i * k + j] = probs[i * k + j] * inv * go[0];
            }
            gx[i * k + t as usize] -= inv * go[0];
        }
        vec![Some(gx)]
    });
    Ok((loss, false))
}

/// Gradient of the Lovasz extension of the Jaccard loss at the given
/// foreground indicators, already in descending-error order.
pub fn lovasz_grad<R: Copy + Num>(fg_sorted: &[bool]) -> Vec<R> {
    let gts = fg_sorted.iter().fold(R::zero(), |acc, &f| if f { acc + R::one() } else { acc });
    let mut out = Vec::with_capacity(fg_sorted.len());
    let mut cum_fg = R::zero();
    let mut cum_bg = R::zero();
    let mut prev = R::zero();
    for &f in fg_sorted {
        if f {
            cum_fg = cum_fg + R::one();
        } else {
            cum_bg = cum_bg + R::one();
        }
        let inter = gts - cum_fg;
        let union = gts + cum_bg;
        let jac = R::one() - inter / union;
        out.push(jac - prev);
        prev = jac;
    }
    out
}

/// Descending order of `errors`, ties kept in index order.
pub fn descending_order<R: Copy + PartialOrd>(errors: &[R]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by(|&a, &b| errors[b].partial_cmp(&errors[a]).unwrap_or(std::cmp::Ordering::Equal));
    order
}

/// Lovasz hinge of one class: `<sorted errors, lovasz_grad(sorted fg)>`.
/// Generic so exact rationals can be used as an oracle.
pub fn lovasz_class_loss<R: Copy + Num + PartialOrd>(errors: &[R], fg: &[bool]) -> R {
    let order = descending_order(errors);
    let fg_sorted: Vec<bool> = order.iter().map(|&i| fg[i]).collect();
    let grad = lovasz_grad::<R>(&fg_sorted);
    order.iter().zip(grad).fold(R::zero(), |acc, (&i, gw)| acc + errors[i] * gw)
}

/// Lovasz-softmax over classes present among the non-ignored targets.
/// `probs` rows are class probabilities.
pub fn lovasz_softmax<T: Scalar>(
    g: &Graph<T>,
    probs: &DenseTensor<T>,
    targets: &[u8],
    ignore: u8,
) -> Result<DenseTensor<T>, TensorError> {
    let (_, k) = check_targets("lovasz_softmax", probs, targets, ignore)?;
    let rows: Vec<usize> = (0..targets.len()).filter(|&i| targets[i] != ignore).collect();
    let pv = probs.values();
    let present: Vec<usize> = (0..k).filter(|&c| rows.iter().any(|&i| targets[i] as usize == c)).collect();
    if present.is_empty() {
        return Ok(g.scale(&g.sum(probs), T::zero()));
    }
    let scale = T::one() / T::lit(present.len() as f64);
    let mut total = T::zero();
    // per (class, row position): d loss / d p
    let mut dp: Vec<(usize, T)> = Vec::new();
    for &c in &present {
        let fg: Vec<bool> = rows.iter().map(|&i| targets[i] as usize == c).collect();
        let errors: Vec<T> = rows
            .iter()
            .zip(&fg)
            .map(|(&i, &f)| {
                let p = pv[i * k + c];
                if f {
                    T::one() - p
                } else {
                    p
                }
            })
            .collect();
        let order = descending_order(&errors);
        if g.tracks_pattern() {
            g.note_pattern(order.iter().map(|&o| o as u64));
        }
        let fg_sorted: Vec<bool> = order.iter().map(|&o| fg[o]).collect();
        let weights = lovasz_grad::<T>(&fg_sorted);
        for (&o, wgt) in order.iter().zip(weights) {
            total += errors[o] * wgt;
            let sign = if fg[o] { -T::one() } else { T::one() };
            dp.push((rows[o] * k + c, sign * wgt * scale));
        }
    }
    let len = probs.len();
    Ok(g.record(vec![1], vec![total * scale], &[probs], move |go, _| {
        let mut gp = vec![T::zero(); len];
        for &(idx, d) in &dp {
            gp[idx] += d * go[0];
        }
        vec![Some(gp)]
    }))
}

/// Which terms contribute to the total loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub completion_ce: bool,
    pub completion_lovasz: bool,
    pub segmentation: bool,
    pub segmentation_ce: bool,
    pub segmentation_lovasz: bool,
    /// Drop invalid voxels from the completion loss; otherwise they count as empty.
    pub exclude_invalid: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            completion_ce: true,
            completion_lovasz: true,
            segmentation: true,
            segmentation_ce: true,
            segmentation_lovasz: true,
            exclude_invalid: true,
        }
    }
}

pub const SIGMA_SEG: f64 = 0.5;
pub const SIGMA_COM: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub completion_ce: f64,
    pub completion_lovasz: f64,
    pub segmentation_ce: f64,
    pub segmentation_lovasz: f64,
    pub loss_com: f64,
    pub loss_seg: f64,
    pub total: f64,
    pub all_ignored: bool,
}

/// `0.5 * (lovasz + ce)_seg + 0.5 * (lovasz + ce)_com` with disabled terms
/// dropped. Completion logits are `voxels x (C+1)` against labels `0..=C`;
/// segmentation logits are `occupied x C` against labels `1..=C`.
pub fn total_loss<T: Scalar>(
    g: &Graph<T>,
    completion_logits: &DenseTensor<T>,
    completion_targets: &[u8],
    segmentation: Option<(&DenseTensor<T>, &[u8])>,
    config: &LossConfig,
) -> Result<(DenseTensor<T>, LossReport), TensorError> {
    let mut report = LossReport::default();
    let com_targets: Vec<u8> = if config.exclude_invalid {
        completion_targets.to_vec()
    } else {
        completion_targets.iter().map(|&t| if t == INVALID { EMPTY } else { t }).collect()
    };
    let mut com_terms = Vec::new();
    if config.completion_ce {
        let (ce, ignored) = cross_entropy(g, completion_logits, &com_targets, IGNORE)?;
        report.completion_ce = ce.values()[0].as_f64();
        report.all_ignored |= ignored;
        com_terms.push(ce);
    }
    if config.completion_lovasz {
        let p = softmax(g, completion_logits)?;
        let lv = lovasz_softmax(g, &p, &com_targets, IGNORE)?;
        report.completion_lovasz = lv.values()[0].as_f64();
        com_terms.push(lv);
    }
    let mut total: Option<DenseTensor<T>> = None;
    let add = |acc: &mut Option<DenseTensor<T>>, t: DenseTensor<T>| -> Result<(), TensorError> {
        *acc = Some(match acc.take() {
            Some(a) => g.add(&a, &t)?,
            None => t,
        });
        Ok(())
    };
    let mut com: Option<DenseTensor<T>> = None;
    for t in com_terms {
        add(&mut com, t)?;
    }
    if let Some(c) = com {
        report.loss_com = c.values()[0].as_f64();
        add(&mut total, g.scale(&c, T::lit(SIGMA_COM)))?;
    }

    if let (true, Some((logits, labels))) = (config.segmentation, segmentation) {
        let targets: Vec<u8> = labels
            .iter()
            .map(|&l| if l == EMPTY || l == INVALID { IGNORE } else { l - 1 })
            .collect();
        let mut seg: Option<DenseTensor<T>> = None;
        if config.segmentation_ce {
            let (ce, _) = cross_entropy(g, logits, &targets, IGNORE)?;
            report.segmentation_ce = ce.values()[0].as_f64();
            add(&mut seg, ce)?;
        }
        if config.segmentation_lovasz {
            let p = softmax(g, logits)?;
            let lv = lovasz_softmax(g, &p, &targets, IGNORE)?;
            report.segmentation_lovasz = lv.values()[0].as_f64();
            add(&mut seg, lv)?;
        }
        if let Some(s) = seg {
            report.loss_seg = s.values()[0].as_f64();
            add(&mut total, g.scale(&s, T::lit(SIGMA_SEG)))?;
        }
    }
    let total = total.ok_or_else(|| TensorError::Incompatible {
        op: "total_loss",
        detail: "every loss term is disabled".into(),
    })?;
    report.total = total.values()[0].as_f64();
    Ok((total, report))
}

/// Most frequent point label per occupied voxel, ties to the lowest id.
/// Labels 0 and [`INVALID`] do not vote; voxels without votes get [`INVALID`].
/// Voxels are returned sorted, matching the encoder's coordinate order.
pub fn segmentation_targets(point_labels: &[u8], voxels: &[Coord]) -> (Vec<Coord>, Vec<u8>) {
    let mut hist: BTreeMap<Coord, [u32; 256]> = BTreeMap::new();
    for (&l, v) in point_labels.iter().zip(voxels) {
        let h = hist.entry(*v).or_insert([0; 256]);
        if l != EMPTY && l != INVALID {
            h[l as usize] += 1;
        }
    }
    hist.into_iter()
        .map(|(c, h)| {
            let mut best = INVALID;
            let mut count = 0;
            for (l, &n) in h.iter().enumerate() {
                if n > count {
                    best = l as u8;
                    count = n;
                }
            }
            (c, best)
        })
        .unzip()
}
