//! Confusion matrices, per-class IoU and frequency-weighted IoU.

use std::ops::AddAssign;

use crate::error::{dim_err, Error, Result};

/// `counts[t * k + p]` = pixels with ground truth `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(dim_err!("confusion matrix rows must form a square grid"));
        }
        Ok(ConfusionMatrix { k, counts: rows.concat() })
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one image's pixels.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(dim_err!("prediction has {} pixels, truth has {}", pred.len(), truth.len()));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            let (p, t) = (p as usize, t as usize);
            if p >= self.k || t >= self.k {
                return Err(Error::Domain(format!("class id out of range for K={}: pred {p}, truth {t}", self.k)));
            }
            self.counts[t * self.k + p] += 1;
        }
        Ok(())
    }

    fn truth_count(&self, c: usize) -> u64 {
        (0..self.k).map(|p| self.get(c, p)).sum()
    }

    fn pred_count(&self, c: usize) -> u64 {
        (0..self.k).map(|t| self.get(t, c)).sum()
    }

    fn check_nonempty(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::Domain("IoU of an empty confusion matrix is undefined".into()));
        }
        Ok(())
    }

    /// `tp / (t + p - tp)` per class; a class absent from both truth and
    /// prediction reports 1.
    pub fn iou_per_class(&self) -> Result<Vec<f64>> {
        self.check_nonempty()?;
        Ok((0..self.k)
            .map(|c| {
                let tp = self.get(c, c);
                let union = self.truth_count(c) + self.pred_count(c) - tp;
                if union == 0 {
                    1.0
                } else {
                    tp as f64 / union as f64
                }
            })
            .collect())
    }

    /// Frequency-weighted IoU: `sum_k (t_k / T) * IoU_k`.
    pub fn fwiou(&self) -> Result<f64> {
        let iou = self.iou_per_class()?;
        let total = self.total() as f64;
        Ok(iou
            .iter()
            .enumerate()
            .map(|(c, v)| {
                let t = self.truth_count(c);
                if t == 0 {
                    0.0
                } else {
                    t as f64 / total * v
                }
            })
            .sum())
    }
}

impl AddAssign<&ConfusionMatrix> for ConfusionMatrix {
    fn add_assign(&mut self, rhs: &ConfusionMatrix) {
        assert_eq!(self.k, rhs.k, "cannot add confusion matrices of different class counts");
        for (a, b) in self.counts.iter_mut().zip(&rhs.counts) {
            *a += b;
        }
    }
}

pub fn confusion_matrix(pred: &[u8], truth: &[u8], k: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(k);
    cm.accumulate(pred, truth)?;
    Ok(cm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_examples() {
        let cm = confusion_matrix(&[1, 0, 1, 1], &[1, 0, 1, 1], 2).unwrap();
        assert_eq!(cm.get(0, 0) + cm.get(1, 1), 4);
        assert_eq!(cm.get(0, 1) + cm.get(1, 0), 0);

        let cm = confusion_matrix(&[1, 0, 0, 0], &[1, 1, 0, 0], 2).unwrap();
        assert_eq!(cm.rows(), vec![vec![2, 0], vec![1, 1]]);

        let empty = confusion_matrix(&[], &[], 2).unwrap();
        assert_eq!(empty.rows(), vec![vec![0, 0], vec![0, 0]]);
        assert!(matches!(confusion_matrix(&[2], &[0], 2), Err(Error::Domain(_))));
    }

    #[test]
    fn iou_examples() {
        let cm = ConfusionMatrix::from_rows(&[vec![2, 0], vec![1, 1]]).unwrap();
        let iou = cm.iou_per_class().unwrap();
        assert!((iou[0] - 2.0 / 3.0).abs() < 1e-15 && (iou[1] - 0.5).abs() < 1e-15);
        assert!((cm.fwiou().unwrap() - 7.0 / 12.0).abs() < 1e-15);

        let perfect = ConfusionMatrix::from_rows(&[vec![3, 0], vec![0, 5]]).unwrap();
        assert_eq!(perfect.fwiou().unwrap(), 1.0);
        assert_eq!(perfect.iou_per_class().unwrap(), vec![1.0, 1.0]);

        let wrong = ConfusionMatrix::from_rows(&[vec![0, 3], vec![5, 0]]).unwrap();
        assert_eq!(wrong.fwiou().unwrap(), 0.0);

        let absent = ConfusionMatrix::from_rows(&[vec![4, 0], vec![0, 0]]).unwrap();
        assert_eq!(absent.iou_per_class().unwrap(), vec![1.0, 1.0]);
        assert_eq!(absent.fwiou().unwrap(), 1.0);

        assert!(matches!(ConfusionMatrix::new(2).fwiou(), Err(Error::Domain(_))));
    }
}
