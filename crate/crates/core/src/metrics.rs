//! Confusion counts over valid voxels and the completion / semantic metrics
//! derived from them.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::kitti::{SceneLabelGrid, EMPTY, INVALID};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("extent mismatch: prediction {pred:?}, truth {truth:?}")]
    Extents { pred: [usize; 3], truth: [usize; 3] },
    #[error("invalid mask has {mask} entries for {voxels} voxels")]
    Mask { mask: usize, voxels: usize },
    #[error("class count mismatch: {0} vs {1}")]
    Classes(usize, usize),
}

/// `(C+1) x (C+1)` counts, truth-major: `counts[t * (C+1) + p]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_count: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(class_count: usize) -> Self {
        let k = class_count + 1;
        Self {
            class_count,
            counts: vec![0; k * k],
        }
    }

    fn k(&self) -> usize {
        self.class_count + 1
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k() + pred]
    }

    /// Adds one scene. Voxels flagged in `invalid` or labelled [`INVALID`]
    /// in the truth are skipped; an [`INVALID`] prediction counts as empty.
    pub fn accumulate(
        &mut self,
        pred: &SceneLabelGrid,
        truth: &SceneLabelGrid,
        invalid: Option<&[bool]>,
    ) -> Result<(), MetricError> {
        if pred.extents() != truth.extents() {
            return Err(MetricError::Extents {
                pred: pred.extents(),
                truth: truth.extents(),
            });
        }
        if let Some(m) = invalid {
            if m.len() != truth.len() {
                return Err(MetricError::Mask {
                    mask: m.len(),
                    voxels: truth.len(),
                });
            }
        }
        let k = self.k();
        for (i, (&p, &t)) in pred.labels().iter().zip(truth.labels()).enumerate() {
            if t == INVALID || invalid.is_some_and(|m| m[i]) {
                continue;
            }
            let p = if p == INVALID { EMPTY } else { p };
            let (t, p) = ((t as usize).min(k - 1), (p as usize).min(k - 1));
            self.counts[t * k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<(), MetricError> {
        if other.class_count != self.class_count {
            return Err(MetricError::Classes(self.class_count, other.class_count));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Occupied-vs-empty `(tp, fp, fn)`.
    pub fn completion_counts(&self) -> (u64, u64, u64) {
        let k = self.k();
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for t in 0..k {
            for p in 0..k {
                let n = self.get(t, p);
                match (t != 0, p != 0) {
                    (true, true) => tp += n,
                    (false, true) => fp += n,
                    (true, false) => fn_ += n,
                    _ => {}
                }
            }
        }
        (tp, fp, fn_)
    }

    /// `(tp, fp, fn)` of semantic class `c` in `1..=C`.
    pub fn class_counts(&self, c: usize) -> (u64, u64, u64) {
        let k = self.k();
        let tp = self.get(c, c);
        let fp = (0..k).filter(|&t| t != c).map(|t| self.get(t, c)).sum();
        let fn_ = (0..k).filter(|&p| p != c).map(|p| self.get(c, p)).sum();
        (tp, fp, fn_)
    }

    pub fn metrics(&self) -> Metrics {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let (tp, fp, fn_) = self.completion_counts();
        let per_class: Vec<f64> = (1..=self.class_count)
            .map(|c| {
                let (tp, fp, fn_) = self.class_counts(c);
                ratio(tp, tp + fp + fn_)
            })
            .collect();
        let present: Vec<f64> = (1..=self.class_count)
            .filter(|&c| {
                let (tp, fp, fn_) = self.class_counts(c);
                tp + fp + fn_ > 0
            })
            .map(|c| per_class[c - 1])
            .collect();
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        Metrics {
            iou: ratio(tp, tp + fp + fn_),
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            miou: mean(&per_class),
            miou_present: mean(&present),
            per_class_iou: per_class,
            valid_voxels: self.total(),
        }
    }
}

/// Ratios with a zero denominator are reported as 0. `miou` averages all
/// `C` classes; `miou_present` skips classes absent from both grids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub miou: f64,
    pub miou_present: f64,
    pub per_class_iou: Vec<f64>,
    pub valid_voxels: u64,
}

pub fn evaluate(pred: &SceneLabelGrid, truth: &SceneLabelGrid, invalid: Option<&[bool]>) -> Result<Metrics, MetricError> {
    let mut cm = ConfusionMatrix::new(truth.class_count().max(pred.class_count()));
    cm.accumulate(pred, truth, invalid)?;
    Ok(cm.metrics())
}

impl Metrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14}{:>8.4}", "iou", self.iou)?;
        writeln!(f, "{:<14}{:>8.4}", "precision", self.precision)?;
        writeln!(f, "{:<14}{:>8.4}", "recall", self.recall)?;
        writeln!(f, "{:<14}{:>8.4}", "miou", self.miou)?;
        writeln!(f, "{:<14}{:>8.4}", "miou_present", self.miou_present)?;
        for (i, v) in self.per_class_iou.iter().enumerate() {
            writeln!(f, "{:<14}{:>8.4}", format!("class_{}", i + 1), v)?;
        }
        write!(f, "{:<14}{:>8}", "valid_voxels", self.valid_voxels)
    }
}
