//! Optimization loop, augmentation and datasets.

mod adam;
mod augment;
mod data;

pub use adam::Adam;
pub use augment::{apply_flip, augment_flip, flip_cloud, Flipped};
pub use data::{load_kitti_dir, synthetic_samples, Sample};

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, CheckpointError};
use crate::kitti::INVALID;
use crate::loss::{segmentation_targets, total_loss, LossConfig, LossReport};
use crate::metrics::{ConfusionMatrix, MetricError, Metrics};
use crate::model::SsaScModel;
use crate::nn::{apply_stat_updates, Mode};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamId, TensorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplied into the learning rate once per epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub flip: bool,
    pub shuffle: bool,
    /// Also score the training set after every epoch.
    pub eval_train: bool,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_decay: 0.98,
            batch_size: 2,
            epochs: 300,
            seed: 0,
            flip: true,
            shuffle: true,
            eval_train: false,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("no gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: usize, detail: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("sample {0} has no per-point labels but segmentation supervision is on")]
    MissingPointLabels(String),
    #[error("sample {name}: extents {found:?} do not match the model's {expected:?}")]
    Extents {
        name: String,
        expected: [usize; 3],
        found: [usize; 3],
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub loss: LossReport,
    pub train: Option<Metrics>,
    pub val: Option<Metrics>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub final_digest: String,
}

pub struct Trainer<T> {
    pub model: SsaScModel<T>,
    pub config: TrainConfig,
    optimizer: Adam<T>,
    steps: usize,
}

impl<T: Scalar> Trainer<T> {
    /// Registers with the optimizer every parameter that the enabled losses
    /// can reach.
    pub fn new(model: SsaScModel<T>, config: TrainConfig) -> Self {
        let params = model.trainable_params(config.loss.segmentation);
        let optimizer = Adam::new(&model.store, params, config.beta1, config.beta2, config.eps);
        Self {
            model,
            config,
            optimizer,
            steps: 0,
        }
    }

    pub fn optimizer_params(&self) -> &[ParamId] {
        self.optimizer.params()
    }

    fn decoder(&self) -> bool {
        self.config.loss.segmentation && self.model.config().branch_3d
    }

    /// Counter-based stream: the draw for a sample depends only on the seed,
    /// the epoch and the sample's index.
    pub fn sample_rng(&self, epoch: usize, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(((epoch as u64) << 32) | index as u64);
        rng
    }

    fn check(&self, s: &Sample) -> Result<(), TrainError> {
        if s.grid.extents() != self.model.extents() {
            return Err(TrainError::Extents {
                name: s.name.clone(),
                expected: self.model.extents(),
                found: s.grid.extents(),
            });
        }
        if self.decoder() && s.point_labels.is_none() {
            return Err(TrainError::MissingPointLabels(s.name.clone()));
        }
        Ok(())
    }

    /// Forward, loss and backward for one sample. Gradients are added into
    /// `acc`; batch-norm statistics are folded in immediately.
    fn accumulate(&mut self, sample: &Sample, rng: Option<&mut ChaCha8Rng>, acc: &mut BTreeMap<ParamId, Vec<T>>) -> Result<LossReport, TrainError> {
        let spec = &self.model.config().grid;
        let aug = match rng {
            Some(rng) => augment_flip(&sample.cloud, &sample.grid, &sample.invalid, spec, rng),
            None => apply_flip(&sample.cloud, &sample.grid, &sample.invalid, spec, false, false),
        };
        let g = Graph::new();
        let out = self.model.forward(&g, &aug.cloud, Mode::Train, self.decoder())?;
        let targets: Vec<u8> = aug
            .grid
            .labels()
            .iter()
            .zip(&aug.invalid)
            .map(|(&l, &bad)| if bad { INVALID } else { l })
            .collect();
        let seg_labels = match (&out.segmentation, &sample.point_labels) {
            (Some(_), Some(labels)) => {
                let kept: Vec<u8> = out.assignment.source.iter().map(|&i| labels[i]).collect();
                Some(segmentation_targets(&kept, &out.assignment.voxels).1)
            }
            _ => None,
        };
        let seg = out.segmentation.as_ref().zip(seg_labels.as_deref()).map(|(s, l)| (s.features(), l));
        let (loss, report) = total_loss(&g, &out.completion, &targets, seg, &self.config.loss)?;
        let grads = g.backward(&loss)?.into_params();
        for (id, gv) in grads {
            match acc.get_mut(&id) {
                Some(a) => a.iter_mut().zip(&gv).for_each(|(a, b)| *a += *b),
                None => {
                    acc.insert(id, gv);
                }
            }
        }
        apply_stat_updates(&mut self.model.store, &g.take_stat_updates());
        Ok(report)
    }

    /// One optimizer step over a batch; the loss is the batch mean.
    /// Registered parameters that no sample reached get a zero gradient.
    pub fn step(&mut self, batch: &[(usize, &Sample)], epoch: usize) -> Result<LossReport, TrainError> {
        let mut acc = BTreeMap::new();
        let mut reports = Vec::new();
        for &(index, sample) in batch {
            self.check(sample)?;
            let mut rng = self.config.flip.then(|| self.sample_rng(epoch, index));
            reports.push(self.accumulate(sample, rng.as_mut(), &mut acc)?);
        }
        let report = mean_report(&reports);
        let step = self.steps;
        if !report.total.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                step,
                detail: format!("loss {report:?}"),
            });
        }
        let scale = T::lit(1.0 / batch.len() as f64);
        for id in self.optimizer.params().to_vec() {
            let g = acc.entry(id).or_insert_with(|| vec![T::zero(); self.model.store.get(id).len()]);
            for v in g.iter_mut() {
                *v *= scale;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    detail: format!("non-finite gradient for `{}`", self.model.store.get(id).name),
                });
            }
        }
        self.optimizer.step(&mut self.model.store, &acc, self.config.lr_at(epoch))?;
        self.steps += 1;
        Ok(report)
    }

    /// Shuffled (when enabled) pass in batches of `batch_size`.
    pub fn run_epoch(&mut self, data: &[Sample], epoch: usize) -> Result<(LossReport, usize), TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        if self.config.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            rng.set_stream(u64::MAX - epoch as u64);
            order.shuffle(&mut rng);
        }
        let mut reports = Vec::new();
        for chunk in order.chunks(self.config.batch_size.max(1)) {
            let batch: Vec<(usize, &Sample)> = chunk.iter().map(|&i| (i, &data[i])).collect();
            reports.push(self.step(&batch, epoch)?);
        }
        Ok((mean_report(&reports), reports.len()))
    }

    /// Trains for `config.epochs`, scoring `val` after every epoch. With an
    /// output directory, writes `log.jsonl`, `final.ckpt` and (with a
    /// validation set) `best.ckpt`, chosen by validation mIoU then IoU.
    pub fn fit(
        &mut self,
        train: &[Sample],
        val: &[Sample],
        out_dir: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<TrainSummary, TrainError> {
        let mut log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|source| io_err(dir, source))?;
                let path = dir.join("log.jsonl");
                Some((fs::File::create(&path).map_err(|source| io_err(&path, source))?, path))
            }
            None => None,
        };
        let mut history = Vec::new();
        let mut best: Option<(usize, f64, f64)> = None;
        for epoch in 0..self.config.epochs {
            let start = Instant::now();
            let (loss, steps) = self.run_epoch(train, epoch)?;
            let train_metrics = if self.config.eval_train {
                Some(evaluate_samples(&self.model, train)?.0.metrics())
            } else {
                None
            };
            let val_metrics = if val.is_empty() {
                None
            } else {
                Some(evaluate_samples(&self.model, val)?.0.metrics())
            };
            let record = EpochRecord {
                epoch,
                lr: self.config.lr_at(epoch),
                steps,
                loss,
                train: train_metrics,
                val: val_metrics,
                seconds: start.elapsed().as_secs_f64(),
            };
            if let Some(m) = &record.val {
                if best.is_none_or(|(_, miou, iou)| (m.miou, m.iou) > (miou, iou)) {
                    best = Some((epoch, m.miou, m.iou));
                    if let Some(dir) = out_dir {
                        checkpoint::save_checkpoint(&self.model, &dir.join("best.ckpt"))?;
                    }
                }
            }
            if let Some((file, path)) = log.as_mut() {
                let line = serde_json::to_string(&record).expect("record serializes");
                writeln!(file, "{line}").map_err(|source| io_err(path, source))?;
            }
            on_epoch(&record);
            history.push(record);
        }
        if let Some(dir) = out_dir {
            checkpoint::save_checkpoint(&self.model, &dir.join("final.ckpt"))?;
        }
        Ok(TrainSummary {
            history,
            best_epoch: best.map(|b| b.0),
            final_digest: checkpoint_digest(&self.model),
        })
    }
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let mut m = LossReport::default();
    for r in reports {
        m.completion_ce += r.completion_ce / n;
        m.completion_lovasz += r.completion_lovasz / n;
        m.segmentation_ce += r.segmentation_ce / n;
        m.segmentation_lovasz += r.segmentation_lovasz / n;
        m.loss_com += r.loss_com / n;
        m.loss_seg += r.loss_seg / n;
        m.total += r.total / n;
        m.all_ignored |= r.all_ignored;
    }
    m
}

/// SHA-256 of the serialized checkpoint, hex encoded.
pub fn checkpoint_digest<T: Scalar>(model: &SsaScModel<T>) -> String {
    Sha256::digest(checkpoint::encode(model)).iter().map(|b| format!("{b:02x}")).collect()
}

/// Inference-mode predictions pooled into one confusion matrix, plus the
/// per-scene metrics.
pub fn evaluate_samples<T: Scalar>(model: &SsaScModel<T>, samples: &[Sample]) -> Result<(ConfusionMatrix, Vec<Metrics>), TrainError> {
    let mut total = ConfusionMatrix::new(model.config().class_count);
    let mut per_scene = Vec::new();
    for s in samples {
        let pred = model.forward_infer(&s.cloud)?;
        let mut cm = ConfusionMatrix::new(model.config().class_count);
        cm.accumulate(&pred, &s.grid, Some(&s.invalid))?;
        per_scene.push(cm.metrics());
        total.merge(&cm)?;
    }
    Ok((total, per_scene))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 0.001);
        assert_eq!(c.lr_at(1), 0.001 * 0.98);
        assert_eq!(c.lr_at(10), 0.001 * 0.98f64.powi(10));
    }

    #[test]
    fn mean_of_reports() {
        let a = LossReport {
            total: 1.0,
            ..LossReport::default()
        };
        let b = LossReport {
            total: 3.0,
            all_ignored: true,
            ..LossReport::default()
        };
        let m = mean_report(&[a, b]);
        assert_eq!(m.total, 2.0);
        assert!(m.all_ignored);
    }
}
