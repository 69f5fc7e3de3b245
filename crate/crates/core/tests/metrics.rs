use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seunet_core::metrics::{confusion_counts, dataset_metrics, image_metrics, ConfusionCounts};
use seunet_core::Tensor;

/// Pixel-by-pixel recount, straight from the set definitions.
fn oracle(pred: &[bool], gt: &[bool]) -> (f64, f64, f64, f64) {
    let inter = pred.iter().zip(gt).filter(|(p, g)| **p && **g).count() as f64;
    let union = pred.iter().zip(gt).filter(|(p, g)| **p || **g).count() as f64;
    let np = pred.iter().filter(|p| **p).count() as f64;
    let ng = gt.iter().filter(|g| **g).count() as f64;
    let div = |a: f64, b: f64| if b == 0.0 { 1.0 } else { a / b };
    (div(2.0 * inter, np + ng), div(inter, union), div(inter, np), div(inter, ng))
}

#[test]
fn matches_brute_force_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let density = rng.gen_range(0.0..1.0);
        let pred: Vec<bool> = (0..256).map(|_| rng.gen_bool(density)).collect();
        let gt: Vec<bool> = (0..256).map(|_| rng.gen_bool(0.4)).collect();
        let m = image_metrics(&confusion_counts(&pred, &gt).unwrap());
        let (dc, iou, pre, rec) = oracle(&pred, &gt);
        assert_eq!((m.dice, m.iou, m.precision, m.recall), (dc, iou, pre, rec));
    }
}

#[test]
fn two_of_each() {
    let c = ConfusionCounts { tp: 2, fp: 2, fn_: 2, tn: 10 };
    let m = image_metrics(&c);
    assert_eq!(m.iou, 1.0 / 3.0);
    assert_eq!(m.dice, 0.5);
    assert_eq!((m.precision, m.recall), (0.5, 0.5));
}

#[test]
fn empty_against_empty_is_perfect() {
    let m = image_metrics(&confusion_counts(&[false; 4], &[false; 4]).unwrap());
    assert_eq!((m.dice, m.iou, m.precision, m.recall), (1.0, 1.0, 1.0, 1.0));
}

#[test]
fn dataset_means_follow_manifest_order() {
    let t = |v: Vec<f32>| Tensor::from_vec([1, 2, 2], v).unwrap();
    let preds = vec![t(vec![0.9, 0.9, 0.1, 0.1]), t(vec![0.6, 0.2, 0.2, 0.2])];
    let gts = vec![t(vec![1.0, 1.0, 0.0, 0.0]), t(vec![1.0, 1.0, 0.0, 0.0])];
    let ids = vec!["a".to_string(), "b".to_string()];
    let r = dataset_metrics(&preds, &gts, &ids).unwrap();
    assert_eq!(r.images[0].id, "a");
    assert_eq!(r.images[0].metrics.dice, 1.0);
    assert!((r.images[1].metrics.dice - 2.0 / 3.0).abs() < 1e-15);
    assert!((r.mean_dice - 5.0 / 6.0).abs() < 1e-15);
    assert!((r.mean_iou - 0.75).abs() < 1e-15);
    let kv = r.to_kv();
    for key in ["mDC=", "mIoU=", "mRec=", "mPre="] {
        assert!(kv.lines().any(|l| l.starts_with(key)), "{key}");
    }
    assert!(dataset_metrics::<f32>(&[], &[], &[]).is_err());
}

fn masks() -> impl Strategy<Value = (Vec<bool>, Vec<bool>)> {
    (1usize..200).prop_flat_map(|n| (prop::collection::vec(any::<bool>(), n), prop::collection::vec(any::<bool>(), n)))
}

proptest! {
    #[test]
    fn dice_is_a_function_of_iou((pred, gt) in masks()) {
        let m = image_metrics(&confusion_counts(&pred, &gt).unwrap());
        prop_assert!((m.dice - 2.0 * m.iou / (1.0 + m.iou)).abs() < 1e-12);
        prop_assert!(m.iou <= m.dice + 1e-15);
        for v in [m.dice, m.iou, m.precision, m.recall] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn pixel_order_does_not_matter((pred, gt) in masks(), seed in any::<u64>()) {
        let mut idx: Vec<usize> = (0..pred.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.gen_range(0..=i));
        }
        let p2: Vec<bool> = idx.iter().map(|&i| pred[i]).collect();
        let g2: Vec<bool> = idx.iter().map(|&i| gt[i]).collect();
        prop_assert_eq!(confusion_counts(&pred, &gt).unwrap(), confusion_counts(&p2, &g2).unwrap());
    }

    #[test]
    fn counts_partition_the_pixels((pred, gt) in masks()) {
        let c = confusion_counts(&pred, &gt).unwrap();
        prop_assert_eq!(c.total() as usize, pred.len());
    }
}
