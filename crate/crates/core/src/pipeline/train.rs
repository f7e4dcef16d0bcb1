use std::path::{Path, PathBuf};

use celldetr_tensor::{clip_grad_norm, lit, AdamW, AdamWConfig, BufferId, Gradients, Graph, Mode, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_compatible, evaluate, mix_seed, prepare_batch};
use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::config::{LossConfig, TrainConfig};
use crate::data::{augment, AugmentConfig, Sample};
use crate::error::{Error, Result};
use crate::losses::{combined_loss, LossParts};
use crate::metrics::EvalReport;
use crate::model::{CellDetr, BACKBONE_GROUP, HEAD_GROUP};

/// One optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    #[serde(rename = "L_p")]
    pub class_loss: f64,
    #[serde(rename = "L_b")]
    pub bbox_loss: f64,
    #[serde(rename = "L_s")]
    pub seg_loss: f64,
    pub total: f64,
    /// Learning rate of the non-backbone parameters.
    pub lr: f64,
}

/// End-of-epoch summary; validation fields are empty when the epoch was not
/// validated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_total: f64,
    pub val_cell_jaccard: Option<f64>,
    pub val_dice: Option<f64>,
    pub val_seg_accuracy: Option<f64>,
    pub val_classification_accuracy: Option<f64>,
}

impl EpochRecord {
    fn new(epoch: usize, mean_total: f64, val: Option<&EvalReport>) -> Self {
        EpochRecord {
            epoch,
            mean_total,
            val_cell_jaccard: val.map(|r| r.cell_jaccard),
            val_dice: val.map(|r| r.dice),
            val_seg_accuracy: val.map(|r| r.seg_accuracy),
            val_classification_accuracy: val.map(|r| r.classification_accuracy),
        }
    }
}

/// Append-only record of a training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    fn push_step(&mut self, r: StepRecord) {
        debug_assert!(self.steps.last().is_none_or(|p| (p.epoch, p.step) < (r.epoch, r.step)));
        self.steps.push(r);
    }

    /// Epoch with the highest validation cell Jaccard (the earliest on ties).
    pub fn best_epoch(&self) -> Option<&EpochRecord> {
        self.epochs
            .iter()
            .filter(|e| e.val_cell_jaccard.is_some())
            .fold(None, |best: Option<&EpochRecord>, e| match best {
                Some(b) if b.val_cell_jaccard >= e.val_cell_jaccard => Some(b),
                _ => Some(e),
            })
    }

    pub fn write_steps_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.steps)
    }

    pub fn write_epochs_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.epochs)
    }
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    /// Apply random augmentation to training samples.
    pub augment: bool,
    pub augment_config: AugmentConfig,
    /// Validate every this many epochs (the last epoch is always validated
    /// when a validation set is given).
    pub validate_every: usize,
    /// Where to write the best checkpoint, if anywhere.
    pub checkpoint: Option<PathBuf>,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            augment: true,
            augment_config: AugmentConfig::default(),
            validate_every: 1,
            checkpoint: None,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    /// Weights after the last step.
    pub last: CellDetr<T>,
    /// Weights of the best validated epoch.
    pub best: Option<(CellDetr<T>, CheckpointMeta)>,
    pub log: TrainLog,
}

/// Batch-averaged loss parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub parts: LossParts<f64>,
    pub total: f64,
}

/// Forward and backward pass over one batch in training mode. Losses are
/// averaged over the batch. Also returns the batch-norm running statistic
/// updates, to be applied after the optimizer step.
#[allow(clippy::type_complexity)]
pub fn loss_and_gradients<T: Scalar>(
    model: &CellDetr<T>,
    batch: &[Sample<T>],
    cfg: &LossConfig,
    seed: u64,
) -> Result<(BatchLoss, Gradients<T>, Vec<(BufferId, Tensor<T>)>)> {
    let c = &model.config;
    let (n, k, size) = (c.num_queries, c.num_classes, c.input_size);
    let hw = size * size;
    let b = batch.len();
    let g = Graph::new(Mode::Train, seed);
    let x = g.input(prepare_batch(batch, size)?);
    let out = model.forward(&g, x)?;
    let preds = model.predictions(&g, &out);
    let inv_b: T = lit(1.0 / b as f64);
    let mut gc = Vec::with_capacity(b * n * k);
    let mut gb = Vec::with_capacity(b * n * 4);
    let mut gm = Vec::with_capacity(b * n * hw);
    let mut parts = LossParts::<f64>::default();
    for (sample, p) in batch.iter().zip(&preds) {
        let l = combined_loss(&sample.instances, p, cfg)?;
        parts.class += l.parts.class.to_f64_lossy();
        parts.bbox += l.parts.bbox.to_f64_lossy();
        parts.seg += l.parts.seg.to_f64_lossy();
        gc.extend(l.grad_class_probs.iter().map(|&v| v * inv_b));
        gb.extend(l.grad_boxes.iter().map(|&v| v * inv_b));
        gm.extend(l.grad_mask_probs.iter().map(|&v| v * inv_b));
    }
    let scale = 1.0 / b as f64;
    parts.class *= scale;
    parts.bbox *= scale;
    parts.seg *= scale;
    let seeds = [
        (out.class_probs, Tensor::from_vec(&[b, n, k], gc)?),
        (out.boxes, Tensor::from_vec(&[b, n, 4], gb)?),
        (out.mask_probs, Tensor::from_vec(&[b, n, size, size], gm)?),
    ];
    let (grads, _) = g.backward(&seeds)?;
    let updates = g.take_buffer_updates();
    Ok((
        BatchLoss {
            total: parts.total(),
            parts,
        },
        grads,
        updates,
    ))
}

/// Runs the training recipe: AdamW with separate backbone and head learning
/// rates under the step schedule of `train_cfg`, shuffled mini-batches,
/// optional augmentation, and selection of the epoch with the best validation
/// cell Jaccard.
pub fn train<T: Scalar>(
    model: CellDetr<T>,
    loss_cfg: &LossConfig,
    train_cfg: &TrainConfig,
    train_set: &[Sample<T>],
    val_set: &[Sample<T>],
    opts: &TrainOptions,
) -> Result<TrainOutcome<T>> {
    train_cfg.validate()?;
    loss_cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    check_compatible(&model, train_set)?;
    check_compatible(&model, val_set)?;
    let mut model = model;
    let mut opt = AdamW::new(AdamWConfig {
        lr: train_cfg.lr_rest,
        beta1: train_cfg.betas.0,
        beta2: train_cfg.betas.1,
        eps: 1e-8,
        weight_decay: train_cfg.weight_decay,
    });
    let seed = train_cfg.seed;
    let mut log = TrainLog::default();
    let mut best: Option<(CellDetr<T>, CheckpointMeta)> = None;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let aug_cfg = AugmentConfig {
        probability: train_cfg.augment_probability,
        ..opts.augment_config
    };

    'epochs: for epoch in 0..train_cfg.total_epochs {
        let factor = train_cfg.lr_factor(epoch);
        opt.set_group_lr(BACKBONE_GROUP, train_cfg.lr_backbone * factor);
        opt.set_group_lr(HEAD_GROUP, train_cfg.lr_rest * factor);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64)));
        let mut epoch_total = 0.0;
        let mut epoch_steps = 0usize;
        for chunk in order.chunks(train_cfg.batch_size) {
            if opts.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let batch: Vec<Sample<T>> = chunk
                .iter()
                .map(|&i| {
                    if opts.augment {
                        let s = mix_seed(mix_seed(seed ^ 0xa5a5, epoch as u64), i as u64);
                        augment(&train_set[i], s, &aug_cfg).0
                    } else {
                        train_set[i].clone()
                    }
                })
                .collect();
            let (loss, mut grads, updates) =
                loss_and_gradients(&model, &batch, loss_cfg, mix_seed(seed ^ 0x5eed, step as u64))?;
            let p = loss.parts;
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    ids: batch.iter().map(|s| s.id.clone()).collect(),
                    class: p.class,
                    bbox: p.bbox,
                    seg: p.seg,
                });
            }
            if train_cfg.grad_clip > 0.0 {
                clip_grad_norm(&mut grads, train_cfg.grad_clip);
            }
            opt.step(&mut model.store, &grads);
            model.store.apply_buffer_updates(updates);
            log.push_step(StepRecord {
                epoch,
                step,
                class_loss: p.class,
                bbox_loss: p.bbox,
                seg_loss: p.seg,
                total: loss.total,
                lr: opt.group_lr(HEAD_GROUP),
            });
            epoch_total += loss.total;
            epoch_steps += 1;
            step += 1;
        }
        let last_epoch = epoch + 1 == train_cfg.total_epochs || opts.max_steps.is_some_and(|m| step >= m);
        let validate =
            !val_set.is_empty() && (last_epoch || (opts.validate_every > 0 && (epoch + 1) % opts.validate_every == 0));
        let report = if validate {
            Some(evaluate(&model, val_set, loss_cfg)?)
        } else {
            None
        };
        let mean_total = epoch_total / epoch_steps.max(1) as f64;
        log::info!(
            "epoch {epoch}: loss {mean_total:.4}{}",
            report
                .as_ref()
                .map(|r| format!(", val J_c {:.4}, seg acc {:.4}", r.cell_jaccard, r.seg_accuracy))
                .unwrap_or_default()
        );
        if let Some(r) = &report {
            let improved = best
                .as_ref()
                .is_none_or(|(_, m)| m.val_cell_jaccard.is_some_and(|b| r.cell_jaccard > b));
            if improved {
                let meta = CheckpointMeta {
                    epoch: Some(epoch),
                    val_cell_jaccard: Some(r.cell_jaccard),
                    seed: Some(seed),
                };
                if let Some(path) = &opts.checkpoint {
                    save_checkpoint(path, &model, &meta)?;
                }
                best = Some((model.clone(), meta));
            }
        }
        log.epochs.push(EpochRecord::new(epoch, mean_total, report.as_ref()));
        if last_epoch {
            break;
        }
    }
    Ok(TrainOutcome { last: model, best, log })
}
