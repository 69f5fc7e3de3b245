//! The training loop.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{Adam, AdamConfig};
use super::checkpoint::save_checkpoint;
use crate::autodiff::Tape;
use crate::data::{stack_batch, Sample};
use crate::error::{Error, Result};
use crate::metrics::{confusion_counts, binarize, image_metrics, ImageRecord, MetricReport};
use crate::model::SeUNetTrans;
use crate::ops::Mode;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Where `epoch_NNNN.seut` files go; `None` disables checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 10, batch_size: 8, seed: 0, adam: AdamConfig::default(), checkpoint_dir: None, checkpoint_every: 10 }
    }
}

/// Summary of one epoch. Metrics come from the train-mode predictions
/// made while the epoch ran.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean loss over the epoch's batches, weighted by batch size.
    pub loss: f64,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub steps: usize,
    pub checkpoint: Option<PathBuf>,
}

impl EpochLog {
    pub fn line(&self) -> String {
        let mut s = format!("epoch {:4} loss {:.6} mDC {:.4} mIoU {:.4} steps {}", self.epoch, self.loss, self.mean_dice, self.mean_iou, self.steps);
        if let Some(p) = &self.checkpoint {
            s.push_str(&format!(" checkpoint {}", p.file_name().map(|f| f.to_string_lossy()).unwrap_or_default()));
        }
        s
    }
}

/// Whether `epoch` (1-based) gets a checkpoint.
pub fn is_checkpoint_epoch(epoch: usize, epochs: usize, every: usize) -> bool {
    epoch == epochs || (every > 0 && epoch.is_multiple_of(every))
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.seut")
}

/// Train `model` for `cfg.epochs` epochs on `data`, calling `on_epoch`
/// after each one. Batches are drawn from a seeded shuffle; the last
/// partial batch is kept.
pub fn train<T: Scalar>(
    model: &mut SeUNetTrans<T>,
    opt: &mut Adam<T>,
    data: &[Sample<T>],
    cfg: &TrainConfig,
    first_epoch: usize,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in first_epoch..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut records = Vec::with_capacity(data.len());
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample<T>> = chunk.iter().map(|&i| &data[i]).collect();
            let (images, masks) = stack_batch(&batch)?;
            let mut tape = Tape::new();
            let x = tape.constant(images);
            let out = model.forward(&mut tape, x, Mode::Train)?;
            let loss = tape.bce_loss(out.logits, &masks)?;
            loss_sum += tape.value(loss).item().to_f64_lossy() * batch.len() as f64;

            let probs = tape.value(out.probs);
            let per = probs.numel() / batch.len();
            for (k, s) in batch.iter().enumerate() {
                let pred = binarize(&probs.data()[k * per..(k + 1) * per]);
                let counts = confusion_counts(&pred, &binarize(s.mask.data()))?;
                records.push(ImageRecord { id: s.id.clone(), counts, metrics: image_metrics(&counts) });
            }

            tape.backward_into(loss, model.params_mut())?;
            opt.step(model.params_mut())?;
            model.apply_batch_stats(&out.batch_stats);
            steps += 1;
        }
        let report = MetricReport::from_images(records);
        let checkpoint = match &cfg.checkpoint_dir {
            Some(dir) if is_checkpoint_epoch(epoch, cfg.epochs, cfg.checkpoint_every) => {
                let path = dir.join(checkpoint_name(epoch));
                save_checkpoint(&path, model, opt, epoch, cfg.seed)?;
                Some(path)
            }
            _ => None,
        };
        let log = EpochLog {
            epoch,
            loss: loss_sum / data.len() as f64,
            mean_dice: report.mean_dice,
            mean_iou: report.mean_iou,
            steps,
            checkpoint,
        };
        on_epoch(&log)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Eval-mode probability maps `(1, H, W)` for each sample, in order.
pub fn predict_samples<T: Scalar>(model: &SeUNetTrans<T>, data: &[Sample<T>], batch_size: usize) -> Result<Vec<crate::tensor::Tensor<T>>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let batch: Vec<&Sample<T>> = chunk.iter().collect();
        let (images, _) = stack_batch(&batch)?;
        let probs = model.predict(&images)?;
        let s = probs.shape().to_vec();
        let per = s[1] * s[2] * s[3];
        for k in 0..chunk.len() {
            out.push(crate::tensor::Tensor::from_vec([s[1], s[2], s[3]], probs.data()[k * per..(k + 1) * per].to_vec())?);
        }
    }
    Ok(out)
}

/// Eval-mode metrics of `model` on `data`.
pub fn evaluate<T: Scalar>(model: &SeUNetTrans<T>, data: &[Sample<T>], batch_size: usize) -> Result<MetricReport> {
    let preds = predict_samples(model, data, batch_size)?;
    let gts: Vec<_> = data.iter().map(|s| s.mask.clone()).collect();
    let ids: Vec<_> = data.iter().map(|s| s.id.clone()).collect();
    crate::metrics::dataset_metrics(&preds, &gts, &ids)
}
