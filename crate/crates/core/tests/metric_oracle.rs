//! Confusion-matrix metrics against a direct per-pixel computation.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sarfuse::metrics::{confusion_matrix, ConfusionMatrix};

/// IoU per class and FwIoU straight from the two masks.
fn brute_force(pred: &[u8], truth: &[u8], k: u8) -> (Vec<f64>, f64) {
    let total = truth.len() as f64;
    let mut ious = vec![];
    let mut fw = 0.0;
    for c in 0..k {
        let (mut tp, mut t, mut p) = (0usize, 0usize, 0usize);
        for (&a, &b) in pred.iter().zip(truth) {
            tp += usize::from(a == c && b == c);
            t += usize::from(b == c);
            p += usize::from(a == c);
        }
        let union = t + p - tp;
        let iou = if union == 0 { 1.0 } else { tp as f64 / union as f64 };
        if t > 0 {
            fw += t as f64 / total * iou;
        }
        ious.push(iou);
    }
    (ious, fw)
}

fn random_mask(rng: &mut ChaCha8Rng, density: f64) -> Vec<u8> {
    (0..256).map(|_| u8::from(rng.random_bool(density))).collect()
}

#[test]
fn agrees_with_brute_force_on_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..200 {
        let density = [0.0, 0.05, 0.3, 0.5, 0.9, 1.0][i % 6];
        let truth = random_mask(&mut rng, density);
        let pred_density = rng.random_range(0.0..1.0);
        let pred = random_mask(&mut rng, pred_density);
        let cm = confusion_matrix(&pred, &truth, 2).unwrap();
        let (ious, fw) = brute_force(&pred, &truth, 2);
        assert!((cm.fwiou().unwrap() - fw).abs() <= 1e-12);
        for (a, b) in cm.iou_per_class().unwrap().iter().zip(&ious) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn worked_example() {
    let cm = ConfusionMatrix::from_rows(&[vec![2, 0], vec![1, 1]]).unwrap();
    assert!((cm.fwiou().unwrap() - 7.0 / 12.0).abs() < 1e-15);
    let cm = confusion_matrix(&[1, 0, 0, 0], &[1, 1, 0, 0], 2).unwrap();
    assert_eq!(cm.rows(), vec![vec![2, 0], vec![1, 1]]);
}

proptest! {
    #[test]
    fn matrices_add_like_concatenated_images(
        a in prop::collection::vec((0u8..2, 0u8..2), 1..200),
        b in prop::collection::vec((0u8..2, 0u8..2), 1..200),
    ) {
        let split = |v: &[(u8, u8)]| -> (Vec<u8>, Vec<u8>) { v.iter().copied().unzip() };
        let (pa, ta) = split(&a);
        let (pb, tb) = split(&b);
        let mut sum = confusion_matrix(&pa, &ta, 2).unwrap();
        sum += &confusion_matrix(&pb, &tb, 2).unwrap();
        let joined = confusion_matrix(&[pa, pb].concat(), &[ta, tb].concat(), 2).unwrap();
        prop_assert_eq!(&sum, &joined);
        prop_assert_eq!(sum.total(), (a.len() + b.len()) as u64);
        let fw = joined.fwiou().unwrap();
        prop_assert!((0.0..=1.0).contains(&fw));
        prop_assert_eq!(sum.fwiou().unwrap(), fw);
    }

    #[test]
    fn perfect_and_inverted_predictions(truth in prop::collection::vec(0u8..2, 1..100)) {
        let cm = confusion_matrix(&truth, &truth, 2).unwrap();
        prop_assert_eq!(cm.fwiou().unwrap(), 1.0);
        prop_assert_eq!(cm.iou_per_class().unwrap(), vec![1.0, 1.0]);
        let inverted: Vec<u8> = truth.iter().map(|v| 1 - v).collect();
        prop_assert_eq!(confusion_matrix(&inverted, &truth, 2).unwrap().fwiou().unwrap(), 0.0);
    }
}
