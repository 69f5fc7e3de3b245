//! Binary segmentation metrics: per-image confusion counts and the
//! dataset means of Dice, IoU, precision and recall.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probabilities at or above this value count as foreground.
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Pixelwise counts of a binary prediction against a binary ground truth.
pub fn confusion_counts(pred: &[bool], gt: &[bool]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch { op: "confusion_counts", lhs: vec![pred.len()], rhs: vec![gt.len()] });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Per-image metric values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageMetrics {
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    // Empty against empty counts as a perfect score.
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn image_metrics(c: &ConfusionCounts) -> ImageMetrics {
    ImageMetrics {
        dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_),
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
    }
}

/// One scored image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub counts: ConfusionCounts,
    pub metrics: ImageMetrics,
}

/// Per-image metrics plus their arithmetic means over the dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub images: Vec<ImageRecord>,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
}

/// Binarize a probability map at [`THRESHOLD`].
pub fn binarize<T: Scalar>(probs: &[T]) -> Vec<bool> {
    probs.iter().map(|p| p.to_f64_lossy() >= THRESHOLD).collect()
}

/// Score probability maps against binary masks, image by image, in the
/// given order. Each element of `preds` and `gts` is one image.
pub fn dataset_metrics<T: Scalar>(preds: &[Tensor<T>], gts: &[Tensor<T>], ids: &[String]) -> Result<MetricReport> {
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if preds.len() != gts.len() || ids.len() != preds.len() {
        return Err(Error::invalid(format!("{} predictions, {} masks, {} ids", preds.len(), gts.len(), ids.len())));
    }
    let mut images = Vec::with_capacity(preds.len());
    for ((p, g), id) in preds.iter().zip(gts).zip(ids) {
        p.expect_same_shape(g, "dataset_metrics")?;
        let counts = confusion_counts(&binarize(p.data()), &binarize(g.data()))?;
        images.push(ImageRecord { id: id.clone(), counts, metrics: image_metrics(&counts) });
    }
    Ok(MetricReport::from_images(images))
}

impl MetricReport {
    pub fn from_images(images: Vec<ImageRecord>) -> Self {
        let t = images.len().max(1) as f64;
        let mean = |f: fn(&ImageMetrics) -> f64| images.iter().map(|r| f(&r.metrics)).sum::<f64>() / t;
        MetricReport {
            mean_dice: mean(|m| m.dice),
            mean_iou: mean(|m| m.iou),
            mean_precision: mean(|m| m.precision),
            mean_recall: mean(|m| m.recall),
            images,
        }
    }

    pub fn count(&self) -> usize {
        self.images.len()
    }

    /// Human-readable table: one row per image, then the means.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}", "image", "TP", "FP", "FN", "TN", "DC", "IoU", "Pre", "Rec");
        for r in &self.images {
            let (c, m) = (&r.counts, &r.metrics);
            let _ = writeln!(
                s,
                "{:<24} {:>8} {:>8} {:>8} {:>8} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                r.id, c.tp, c.fp, c.fn_, c.tn, m.dice, m.iou, m.precision, m.recall
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "images {}", self.count());
        let _ = writeln!(s, "mDC    {:.6}", self.mean_dice);
        let _ = writeln!(s, "mIoU   {:.6}", self.mean_iou);
        let _ = writeln!(s, "mRec   {:.6}", self.mean_recall);
        let _ = writeln!(s, "mPre   {:.6}", self.mean_precision);
        s
    }

    /// `key=value` lines for machines.
    pub fn to_kv(&self) -> String {
        format!(
            "images={}\nmDC={:.9}\nmIoU={:.9}\nmRec={:.9}\nmPre={:.9}\n",
            self.count(),
            self.mean_dice,
            self.mean_iou,
            self.mean_recall,
            self.mean_precision
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> Vec<bool> {
        bits.iter().map(|&b| b == 1).collect()
    }

    #[test]
    fn perfect_match_counts() {
        let mut gt = vec![false; 16];
        gt[..5].iter_mut().for_each(|b| *b = true);
        let c = confusion_counts(&gt, &gt).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 5, fp: 0, fn_: 0, tn: 11 });
    }

    #[test]
    fn half_overlap() {
        let gt = mask(&[1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        let pred = mask(&[0, 0, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        let c = confusion_counts(&pred, &gt).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 2, fp: 2, fn_: 2, tn: 10 });
        let m = image_metrics(&c);
        assert_eq!(m.iou, 1.0 / 3.0);
        assert_eq!((m.dice, m.precision, m.recall), (0.5, 0.5, 0.5));
    }

    #[test]
    fn empty_vs_empty_is_perfect() {
        let z = vec![false; 9];
        let c = confusion_counts(&z, &z).unwrap();
        assert_eq!(c.tn, 9);
        let m = image_metrics(&c);
        assert_eq!((m.dice, m.iou, m.precision, m.recall), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn length_mismatch() {
        assert!(confusion_counts(&[true], &[true, false]).is_err());
    }

    #[test]
    fn mean_over_images() {
        let gt = Tensor::<f64>::from_f64([1, 2, 2], &[1.0, 1.0, 0.0, 0.0]).unwrap();
        let half = Tensor::<f64>::from_f64([1, 2, 2], &[1.0, 0.0, 1.0, 0.0]).unwrap();
        let ids = vec!["a".to_string(), "b".to_string()];
        let r = dataset_metrics(&[gt.clone(), half], &[gt.clone(), gt], &ids).unwrap();
        assert_eq!(r.images[1].metrics.dice, 0.5);
        assert_eq!(r.mean_dice, 0.75);
    }

    #[test]
    fn threshold_is_inclusive() {
        assert_eq!(binarize(&[0.5f32, 0.4999]), vec![true, false]);
    }

    #[test]
    fn empty_dataset() {
        assert!(matches!(dataset_metrics::<f32>(&[], &[], &[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn report_lines() {
        let gt = Tensor::<f32>::ones([1, 2, 2]);
        let r = dataset_metrics(std::slice::from_ref(&gt), std::slice::from_ref(&gt), &["x".into()]).unwrap();
        let t = r.to_table();
        for key in ["mDC", "mIoU", "mRec", "mPre"] {
            assert!(t.contains(key));
            assert!(r.to_kv().contains(&format!("{key}=1.0")));
        }
    }
}
